//! Log-space probability primitives and a minimal reverse-mode tape.

mod logspace;
mod tape;

pub use logspace::{log_sum_exp, normalize_logits, LogDistribution, ENTRY_SLACK, NORMALIZATION_TOL};
pub(crate) use logspace::lse;
pub use tape::{gradient, Activation, Gradients, Parameter, Tape, Tensor, Var};
