//! Minimal reverse-mode differentiation over a fixed set of primitives.
//!
//! A [`Tape`] records every operation of a scalar loss program as a node
//! holding its forward value. [`Tape::backward`] then walks the nodes in
//! reverse and accumulates exact adjoints. Values are dense `f64` tensors;
//! the primitives cover elementwise arithmetic, `exp`, `log`,
//! `log_sum_exp`, matrix-vector products, pointwise nonlinearities, and the
//! indexing needed to look up embeddings.
//!
//! ```
//! use berag::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let p = tape.leaf(Tensor::scalar(3.0));
//! let loss = tape.mul(p, p);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(p).data(), &[6.0]);
//! ```

use serde::{Deserialize, Serialize};

use super::logspace::lse;
use crate::error::{usage, BeragError, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(usage(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Trainable tensor with a stable identifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    #[serde(skip)]
    pub gradient: Option<Tensor>,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor) -> Self {
        Self {
            id: id.into(),
            value,
            gradient: None,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    // derivative expressed through input and output
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, Var),
    SubScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Act(Var, Activation),
    Lse(Var),
    Sum(Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Concat(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::SubScalar(..) => "sub_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Act(..) => "activation",
            Op::Lse(_) => "log_sum_exp",
            Op::Sum(_) => "sum",
            Op::MatVec(..) => "matvec",
            Op::VecMat(..) => "vecmat",
            Op::Gather(..) => "gather",
            Op::GatherRows(..) => "gather_rows",
            Op::Concat(_) => "concat",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Operation recorder for one loss evaluation.
///
/// Shape errors are programming errors and panic; non-finite forward values
/// (NaN or `+inf`) are remembered and reported by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(usize, &'static str)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let idx = self.nodes.len();
        if self.fault.is_none()
            && value
                .data
                .iter()
                .any(|v| v.is_nan() || *v == f64::INFINITY)
        {
            self.fault = Some((idx, op.name()));
        }
        self.nodes.push(Node { op, value });
        Var(idx)
    }

    /// Records an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        self.leaf(p.value.clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First element of a node's value.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.len(), y.len(), "elementwise op on mismatched shapes");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let shape = x.shape.clone();
        self.push(op, Tensor { shape, data })
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|p| f(*p)).collect();
        let shape = x.shape.clone();
        self.push(op, Tensor { shape, data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `v + s` with scalar `s` broadcast over `v`.
    pub fn add_scalar(&mut self, v: Var, s: Var) -> Var {
        let c = self.scalar(s);
        self.map(v, Op::AddScalar(v, s), |x| x + c)
    }

    /// `v - s` with scalar `s` broadcast over `v`.
    pub fn sub_scalar(&mut self, v: Var, s: Var) -> Var {
        let c = self.scalar(s);
        self.map(v, Op::SubScalar(v, s), |x| x - c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        self.map(a, Op::Act(a, act), |x| act.apply(x))
    }

    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let v = lse(self.data(a));
        self.push(Op::Lse(a), Tensor::scalar(v))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.data(a).iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(v))
    }

    /// `v - log_sum_exp(v)`.
    pub fn log_softmax(&mut self, v: Var) -> Var {
        let z = self.log_sum_exp(v);
        self.sub_scalar(v, z)
    }

    /// `m · v` for `m` of shape `[r, c]` and `v` of length `c`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Var {
        let (mt, vt) = (self.value(m), self.value(v));
        let (r, c) = mt.dims2().expect("matvec needs a 2-D matrix");
        assert_eq!(c, vt.len(), "matvec inner dimension mismatch");
        let out = (0..r)
            .map(|i| {
                mt.data[i * c..(i + 1) * c]
                    .iter()
                    .zip(&vt.data)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        self.push(Op::MatVec(m, v), Tensor::vector(out))
    }

    /// `wᵀ · m` for `w` of length `r` and `m` of shape `[r, c]`.
    pub fn vecmat(&mut self, w: Var, m: Var) -> Var {
        let (wt, mt) = (self.value(w), self.value(m));
        let (r, c) = mt.dims2().expect("vecmat needs a 2-D matrix");
        assert_eq!(r, wt.len(), "vecmat inner dimension mismatch");
        let mut out = vec![0.0; c];
        for (i, wi) in wt.data.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(&mt.data[i * c..(i + 1) * c]) {
                *o += wi * x;
            }
        }
        self.push(Op::VecMat(w, m), Tensor::vector(out))
    }

    /// Picks flat elements of `a` into a vector.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.data(a);
        let out = idx.iter().map(|&i| src[i]).collect();
        self.push(Op::Gather(a, idx), Tensor::vector(out))
    }

    pub fn select(&mut self, a: Var, i: usize) -> Var {
        self.gather(a, vec![i])
    }

    /// Stacks rows of a `[r, c]` matrix into an `[n, c]` matrix.
    pub fn gather_rows(&mut self, m: Var, rows: Vec<usize>) -> Var {
        let mt = self.value(m);
        let (_, c) = mt.dims2().expect("gather_rows needs a 2-D matrix");
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            out.extend_from_slice(&mt.data[r * c..(r + 1) * c]);
        }
        let n = rows.len();
        self.push(
            Op::GatherRows(m, rows),
            Tensor {
                shape: vec![n, c],
                data: out,
            },
        )
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.data(*p));
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(out))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if let Some((node, op)) = self.fault {
            return Err(BeragError::Numeric { node, op });
        }
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(usage("backward needs a scalar root"));
        }
        if !root_node.value.data[0].is_finite() {
            return Err(BeragError::Numeric {
                node: root.0,
                op: root_node.op.name(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if g.iter().any(|x| !x.is_finite()) {
                return Err(BeragError::Numeric {
                    node: i,
                    op: node.op.name(),
                });
            }
            self.propagate(node, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        macro_rules! acc {
            ($v:expr) => {{
                let n = self.nodes[$v.0].value.len();
                adj[$v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                axpy(acc!(*a), g, 1.0);
                axpy(acc!(*b), g, 1.0);
            }
            Op::Sub(a, b) => {
                axpy(acc!(*a), g, 1.0);
                axpy(acc!(*b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.data(*a), self.data(*b));
                let ga = acc!(*a);
                for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *o += gi * yi;
                }
                let gb = acc!(*b);
                for ((o, gi), xi) in gb.iter_mut().zip(g).zip(x) {
                    *o += gi * xi;
                }
            }
            Op::Scale(a, c) => axpy(acc!(*a), g, *c),
            Op::AddScalar(v, s) | Op::SubScalar(v, s) => {
                let sign = if matches!(node.op, Op::AddScalar(..)) {
                    1.0
                } else {
                    -1.0
                };
                axpy(acc!(*v), g, 1.0);
                acc!(*s)[0] += sign * g.iter().sum::<f64>();
            }
            Op::Exp(a) => {
                let ga = acc!(*a);
                for ((o, gi), yi) in ga.iter_mut().zip(g).zip(out) {
                    *o += gi * yi;
                }
            }
            Op::Log(a) => {
                let x = self.data(*a);
                let ga = acc!(*a);
                for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                    *o += gi / xi;
                }
            }
            Op::Act(a, act) => {
                let x = self.data(*a);
                let ga = acc!(*a);
                for i in 0..ga.len() {
                    ga[i] += g[i] * act.derivative(x[i], out[i]);
                }
            }
            Op::Lse(a) => {
                let x = self.data(*a);
                let z = out[0];
                let ga = acc!(*a);
                if z > f64::NEG_INFINITY {
                    for (o, xi) in ga.iter_mut().zip(x) {
                        *o += g[0] * (xi - z).exp();
                    }
                }
            }
            Op::Sum(a) => {
                for o in acc!(*a).iter_mut() {
                    *o += g[0];
                }
            }
            Op::MatVec(m, v) => {
                let (mt, vt) = (self.value(*m), self.data(*v));
                let (r, c) = mt.dims2().unwrap();
                let gm = acc!(*m);
                for i in 0..r {
                    for j in 0..c {
                        gm[i * c + j] += g[i] * vt[j];
                    }
                }
                let gv = acc!(*v);
                for i in 0..r {
                    let row = &mt.data[i * c..(i + 1) * c];
                    for j in 0..c {
                        gv[j] += g[i] * row[j];
                    }
                }
            }
            Op::VecMat(w, m) => {
                let (wt, mt) = (self.data(*w), self.value(*m));
                let (r, c) = mt.dims2().unwrap();
                let gw = acc!(*w);
                for i in 0..r {
                    let row = &mt.data[i * c..(i + 1) * c];
                    gw[i] += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
                let gm = acc!(*m);
                for i in 0..r {
                    for j in 0..c {
                        gm[i * c + j] += wt[i] * g[j];
                    }
                }
            }
            Op::Gather(a, idx) => {
                let ga = acc!(*a);
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
            }
            Op::GatherRows(m, rows) => {
                let c = self.value(*m).dims2().unwrap().1;
                let gm = acc!(*m);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        gm[r * c + j] += g[k * c + j];
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    axpy(acc!(*p), &g[off..off + n], 1.0);
                    off += n;
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Adjoints from one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, shaped like `v`'s value.
    /// Nodes the root does not depend on get zeros.
    pub fn wrt_in(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape.clone();
        match self.adj.get(v.0).and_then(|a| a.as_ref()) {
            Some(a) => Tensor {
                shape,
                data: a.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    /// Raw adjoint as a flat tensor (zeros are not materialised: empty if unreached).
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.adj.get(v.0).and_then(|a| a.as_ref()) {
            Some(a) => Tensor::vector(a.clone()),
            None => Tensor::vector(Vec::new()),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.adj.get(v.0).and_then(|a| a.as_deref())
    }
}

/// Evaluates `program` on a fresh tape with every parameter bound as a
/// leaf, then stores exact gradients into each `Parameter::gradient`.
/// Returns the loss value.
pub fn gradient<F>(params: &mut [Parameter], program: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let root = program(&mut tape, &vars);
    let grads = tape.backward(root)?;
    for (p, v) in params.iter_mut().zip(&vars) {
        p.gradient = Some(grads.wrt_in(&tape, *v));
    }
    Ok(tape.scalar(root))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut params = vec![Parameter::new("p", Tensor::scalar(3.0))];
        let loss = gradient(&mut params, |t, v| t.mul(v[0], v[0])).unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(params[0].gradient.as_ref().unwrap().data(), &[6.0]);
    }

    #[test]
    fn lse_gradient_symmetric() {
        let mut params = vec![Parameter::new("p", Tensor::scalar(0.0))];
        gradient(&mut params, |t, v| {
            let zero = t.leaf(Tensor::scalar(0.0));
            let both = t.concat(&[v[0], zero]);
            t.log_sum_exp(both)
        })
        .unwrap();
        assert_eq!(params[0].gradient.as_ref().unwrap().data(), &[0.5]);
    }

    #[test]
    fn unreached_parameter_gets_zeros() {
        let mut params = vec![
            Parameter::new("a", Tensor::scalar(2.0)),
            Parameter::new("b", Tensor::vector(vec![1.0, 2.0])),
        ];
        gradient(&mut params, |t, v| t.exp(v[0])).unwrap();
        assert_eq!(params[1].gradient.as_ref().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn nan_is_reported_with_node() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(-1.0));
        let l = tape.log(a);
        let s = tape.sum(l);
        match tape.backward(s) {
            Err(BeragError::Numeric { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn infinite_root_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(0.0));
        let l = tape.log(a);
        assert!(matches!(tape.backward(l), Err(BeragError::Numeric { .. })));
    }

    #[test]
    fn matvec_and_vecmat_values() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let v = tape.leaf(Tensor::vector(vec![1., 0., -1.]));
        let w = tape.leaf(Tensor::vector(vec![2., -1.]));
        let mv = tape.matvec(m, v);
        let wm = tape.vecmat(w, m);
        assert_eq!(tape.value(mv).data(), &[-2., -2.]);
        assert_eq!(tape.value(wm).data(), &[-2., -1., 0.]);
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
