//! One function per subcommand. Each resolves its settings (flags, then the
//! config file), stamps a [`Meta`], writes its artifacts and returns the
//! summary printed on standard output.

use std::path::{Path, PathBuf};

use berag::backend::{Checkpoint, PriorHead, ScorerBackend, TinyBackend, TinyConfig, TokenId};
use berag::decoder::DecodeConfig;
use berag::harness::{
    bench_latency, evaluate, gen_kbqa, gen_needle, position_buckets, read_jsonl, relevance_accuracy,
    rerank_recall, to_jsonl, BenchVariant, DistractorLevel, GoldRank, ItemOutcome, KbConfig, ScenarioConfig, Strategy,
    SyntheticKb, EOS,
};
use berag::numerics::Activation;
use berag::training::{curve_csv, OptimizerKind, TrainConfig, TrainingItem};
use berag::BeragError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{write_artifact, FileConfig, Meta};
use crate::{
    BenchArgs, DecodeArgs, DecodeOpts, Distractors, EvalArgs, Failure, Finished, GenDataArgs, ModelInput, Optimizer,
    Pruning, RerankArgs, StrategyArg, SweepArgs, Task, TrainArgs,
};

pub struct Context {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub file: FileConfig,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn strategy(s: StrategyArg) -> Strategy {
    match s {
        StrategyArg::Berag => Strategy::Berag,
        StrategyArg::Concat => Strategy::Concat,
        StrategyArg::AllDeflect => Strategy::AllDeflect,
    }
}

/// Summary fields shared by every command.
fn summary(meta: &Meta, outputs: &[(&str, &Path)]) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(meta.command));
    m.insert("version".into(), json!(meta.version));
    m.insert("config_hash".into(), json!(meta.config_hash));
    m.insert("seed".into(), json!(meta.seed));
    let outs: serde_json::Map<String, Value> =
        outputs.iter().map(|(k, p)| ((*k).to_string(), json!(p.display().to_string()))).collect();
    m.insert("outputs".into(), Value::Object(outs));
    m
}

fn done(map: serde_json::Map<String, Value>) -> Result<Finished, Failure> {
    Ok(Finished {
        summary: Value::Object(map),
        code: 0,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NeedleConfig {
    documents: usize,
    test_documents: usize,
    doc_len: usize,
    vocab: usize,
}

pub fn gen_data(ctx: &Context, a: &GenDataArgs) -> Result<Finished, Failure> {
    let test_k = a.test_k.unwrap_or(a.k);
    let test_rate = a.test_gold_present_rate.unwrap_or(a.gold_present_rate);
    let (train, test, settings) = match a.task {
        Task::Kbqa => {
            let kb_config = ctx.file.overlay(
                "kb",
                KbConfig {
                    vocab: a.vocab,
                    entities: a.entities,
                    attributes: a.attributes,
                    doc_len: a.doc_len,
                    ..KbConfig::default()
                },
            )?;
            let distractors = match a.distractors {
                Distractors::Random => DistractorLevel::Random,
                Distractors::SharedEntity => DistractorLevel::SharedEntity,
                Distractors::SharedEntityAttribute => DistractorLevel::SharedEntityAttribute,
            };
            let scenario = |k: usize, rate: f64| ScenarioConfig {
                k,
                gold_rank: GoldRank::Uniform(k.max(1)),
                gold_present_rate: rate,
                distractors,
            };
            let train_sc = ctx.file.overlay("train_scenario", scenario(a.k, a.gold_present_rate))?;
            let test_sc = ctx.file.overlay("test_scenario", scenario(test_k, test_rate))?;
            let kb = SyntheticKb::new(kb_config.clone(), ctx.seed)?;
            let train = gen_kbqa(&kb, &train_sc, a.items, ctx.seed.wrapping_add(1))?;
            let test = gen_kbqa(&kb, &test_sc, a.test_items, ctx.seed.wrapping_add(2))?;
            let settings = json!({
                "task": "kbqa",
                "kb": kb_config,
                "train_scenario": train_sc,
                "test_scenario": test_sc,
                "items": a.items,
                "test_items": a.test_items,
            });
            (train, test, settings)
        }
        Task::Needle => {
            let nc = ctx.file.overlay(
                "needle",
                NeedleConfig {
                    documents: a.k,
                    test_documents: test_k,
                    doc_len: if a.doc_len == 0 { 12 } else { a.doc_len },
                    vocab: a.vocab,
                },
            )?;
            let train = gen_needle(nc.documents, nc.doc_len, nc.vocab, a.items, ctx.seed.wrapping_add(1))?;
            let test = gen_needle(nc.test_documents, nc.doc_len, nc.vocab, a.test_items, ctx.seed.wrapping_add(2))?;
            let settings = json!({
                "task": "needle",
                "needle": nc,
                "items": a.items,
                "test_items": a.test_items,
            });
            (train, test, settings)
        }
    };
    let meta = Meta::new("gen-data", ctx.seed, settings.clone(), &[])?;

    let (train_path, test_path, manifest_path) = (ctx.path("train.jsonl"), ctx.path("test.jsonl"), ctx.path("manifest.json"));
    let mut files = serde_json::Map::new();
    for (name, path, items) in [("train", &train_path, &train), ("test", &test_path, &test)] {
        let text = to_jsonl(items)?;
        write_artifact(path, text.as_bytes())?;
        files.insert(
            name.into(),
            json!({
                "path": path.file_name().map(|f| f.to_string_lossy().into_owned()),
                "items": items.len(),
                "sha256": crate::config::sha256_hex(text.as_bytes()),
            }),
        );
    }
    let manifest = json!({ "meta": meta, "settings": settings, "files": files });
    let mut text = serde_json::to_string_pretty(&manifest).map_err(BeragError::from)?;
    text.push('\n');
    write_artifact(&manifest_path, text.as_bytes())?;

    let mut s = summary(
        &meta,
        &[("train", &train_path), ("test", &test_path), ("manifest", &manifest_path)],
    );
    s.insert("train_items".into(), json!(train.len()));
    s.insert("test_items".into(), json!(test.len()));
    done(s)
}

fn max_token(items: &[TrainingItem]) -> TokenId {
    items
        .iter()
        .flat_map(|it| {
            it.query
                .tokens()
                .iter()
                .chain(&it.answer)
                .chain(it.docs.iter().flat_map(|d| &d.tokens))
                .copied()
        })
        .max()
        .unwrap_or(0)
}

/// Checkpoint JSON with the run metadata added under `meta`; loading ignores it.
fn checkpoint_bytes(ck: &Checkpoint, meta: &Meta) -> Result<Vec<u8>, Failure> {
    let mut value: Value = serde_json::from_str(&ck.to_json()?).map_err(BeragError::from)?;
    value["meta"] = serde_json::to_value(meta).map_err(BeragError::from)?;
    Ok(serde_json::to_vec(&value).map_err(BeragError::from)?)
}

pub fn train(ctx: &Context, a: &TrainArgs) -> Result<Finished, Failure> {
    let items = read_jsonl(&a.data)?;
    let config = ctx.file.overlay(
        "train",
        TrainConfig {
            k_train: a.k_train,
            epochs: a.epochs,
            batch_size: a.batch_size,
            lr: a.lr,
            prior_lr: Some(a.prior_lr),
            null_rate: a.null_rate,
            include_null_doc: a.include_null_doc,
            include_prior_loss: a.prior_loss,
            prior_weight: a.prior_weight,
            optimizer: match a.optimizer {
                Optimizer::Sgd => OptimizerKind::Sgd,
                Optimizer::Adam => OptimizerKind::Adam,
            },
            clip_norm: a.clip_norm,
            seed: ctx.seed,
        },
    )?;
    let mut inputs: Vec<(&str, &Path)> = vec![("data", &a.data)];
    let (backend, head, model) = match &a.init {
        Some(path) => {
            inputs.push(("init", path));
            let ck = Checkpoint::load(path)?;
            (ck.backend, ck.prior_head, Value::Null)
        }
        None => {
            let vocab = a.vocab.unwrap_or(max_token(&items) as usize + 1);
            let mc = ctx.file.overlay(
                "model",
                TinyConfig {
                    vocab,
                    dim: a.dim,
                    seed: ctx.seed,
                    ..TinyConfig::default()
                },
            )?;
            let backend = TinyBackend::new(mc.clone())?;
            let head = PriorHead::random(backend.embedding_dim(), Activation::Tanh, ctx.seed.wrapping_add(7));
            (backend, head, serde_json::to_value(mc).map_err(BeragError::from)?)
        }
    };
    let meta = Meta::new("train", ctx.seed, json!({ "train": config, "model": model }), &inputs)?;

    let trained = berag::training::train(&items, backend, head, &config)?;
    let ck = Checkpoint::new(trained.backend, trained.head)?;
    let ck_path = a.out.clone().unwrap_or_else(|| ctx.path("checkpoint.json"));
    let curve_path = ctx.path("curve.csv");
    write_artifact(&ck_path, &checkpoint_bytes(&ck, &meta)?)?;
    write_artifact(&curve_path, (meta.csv_header() + &curve_csv(&trained.curve)).as_bytes())?;

    let mut s = summary(&meta, &[("checkpoint", &ck_path), ("curve", &curve_path)]);
    s.insert("items".into(), json!(items.len()));
    s.insert("epochs".into(), json!(trained.curve.len()));
    s.insert("final_loss".into(), json!(trained.curve.last().map(|e| e.mean_loss)));
    s.insert("final_prior_loss".into(), json!(trained.curve.last().and_then(|e| e.prior_loss)));
    done(s)
}

struct Loaded {
    backend: TinyBackend,
    head: PriorHead,
    items: Vec<TrainingItem>,
}

fn load(input: &ModelInput) -> Result<Loaded, Failure> {
    let ck = Checkpoint::load(&input.checkpoint)?;
    let items = read_jsonl(&input.data)?;
    let vocab = ck.backend.vocab_size();
    if let Some(it) = items.iter().find(|it| max_token(std::slice::from_ref(*it)) as usize >= vocab) {
        return Err(BeragError::Schema(format!(
            "item {} uses tokens outside the checkpoint vocabulary of {vocab}",
            it.id
        ))
        .into());
    }
    Ok(Loaded {
        backend: ck.backend,
        head: ck.prior_head,
        items,
    })
}

fn inputs(input: &ModelInput) -> [(&'static str, &Path); 2] {
    [("data", &input.data), ("checkpoint", &input.checkpoint)]
}

fn decode_config(ctx: &Context, o: &DecodeOpts) -> Result<DecodeConfig, Failure> {
    ctx.file.overlay(
        "decode",
        DecodeConfig {
            k: o.k,
            max_new_tokens: o.max_new_tokens,
            top_p_pruning: o.prune,
            include_null_doc: o.include_null_doc || o.deflection,
            deflection: o.deflection,
            eos: EOS,
            context_limit: o.context_limit,
        },
    )
}

fn excluded(outcomes: &[ItemOutcome]) -> Vec<&str> {
    outcomes.iter().filter(|o| o.out_of_length).map(|o| o.id.as_str()).collect()
}

/// Notes out-of-length items in the summary and picks the exit code.
fn finish_partial(mut s: serde_json::Map<String, Value>, outcomes: &[ItemOutcome], limit: usize) -> Finished {
    let ids = excluded(outcomes);
    let code = if ids.is_empty() { 0 } else { 5 };
    if !ids.is_empty() {
        s.insert(
            "notes".into(),
            json!(format!(
                "{} of {} items exceed the {limit}-token context and are excluded from every metric",
                ids.len(),
                outcomes.len()
            )),
        );
    }
    s.insert("out_of_length".into(), json!(ids.len()));
    s.insert("excluded_items".into(), json!(ids));
    Finished {
        summary: Value::Object(s),
        code,
    }
}

pub fn decode(ctx: &Context, a: &DecodeArgs) -> Result<Finished, Failure> {
    let m = load(&a.input)?;
    let config = decode_config(ctx, &a.decode)?;
    let strategy = strategy(a.decode.strategy);
    let meta = Meta::new(
        "decode",
        ctx.seed,
        json!({ "strategy": strategy, "decode": config }),
        &inputs(&a.input),
    )?;
    let (report, outcomes) = evaluate(&m.backend, &m.head, &m.items, strategy, &config)?;

    let mut answers = meta.jsonl_header();
    let mut traces = meta.jsonl_header();
    for o in &outcomes {
        let line = json!({
            "id": o.id,
            "tokens": o.tokens,
            "exact_match": o.exact_match,
            "deflected": o.deflected,
            "gold_position": o.gold_position,
            "out_of_length": o.out_of_length,
        });
        answers.push_str(&line.to_string());
        answers.push('\n');
        if let Some(t) = &o.trace {
            let head = json!({
                "item": o.id,
                "doc_ids": t.doc_ids,
                "prior": t.prior,
                "prior_deflection": t.prior_deflection,
                "prefill_pairs": t.prefill_pairs,
            });
            traces.push_str(&head.to_string());
            traces.push('\n');
            traces.push_str(&t.to_jsonl(&o.id)?);
        }
    }
    let (answers_path, trace_path) = (ctx.path("answers.jsonl"), ctx.path("trace.jsonl"));
    write_artifact(&answers_path, answers.as_bytes())?;
    write_artifact(&trace_path, traces.as_bytes())?;

    let mut s = summary(&meta, &[("answers", &answers_path), ("trace", &trace_path)]);
    s.insert("strategy".into(), json!(strategy));
    s.insert("k".into(), json!(config.k));
    s.insert("items".into(), json!(outcomes.len()));
    s.insert("exact_match".into(), json!(report.exact_match.value()));
    Ok(finish_partial(s, &outcomes, config.context_limit))
}

/// Whether a metric row belongs in the eval CSV. Timings are left out so
/// repeated runs give identical files; `bench` measures them.
fn keep_row(metric: &str, strict_rag: bool, deflection: bool) -> bool {
    if matches!(metric, "ms_per_token" | "ttft_ms") {
        return false;
    }
    if metric.starts_with("recall_at_") || metric == "strict_rag" {
        return strict_rag;
    }
    if metric.starts_with("deflection_") {
        return deflection;
    }
    true
}

pub fn eval(ctx: &Context, a: &EvalArgs) -> Result<Finished, Failure> {
    let m = load(&a.input)?;
    let config = decode_config(ctx, &a.decode)?;
    let strategy = strategy(a.decode.strategy);
    let meta = Meta::new(
        "eval",
        ctx.seed,
        json!({ "strategy": strategy, "decode": config, "strict_rag": a.strict_rag }),
        &inputs(&a.input),
    )?;
    let (report, outcomes) = evaluate(&m.backend, &m.head, &m.items, strategy, &config)?;

    let mut csv = meta.csv_header();
    for (i, line) in report.to_csv().lines().enumerate() {
        let metric = line.split(',').next().unwrap_or_default();
        if i == 0 || keep_row(metric, a.strict_rag, config.deflection) {
            csv.push_str(line);
            csv.push('\n');
        }
    }
    let path = ctx.path("eval.csv");
    write_artifact(&path, csv.as_bytes())?;

    let mut s = summary(&meta, &[("eval", &path)]);
    s.insert("strategy".into(), json!(strategy));
    s.insert("k".into(), json!(config.k));
    s.insert("items".into(), json!(report.items));
    s.insert("exact_match".into(), json!(report.exact_match.value()));
    if a.strict_rag {
        s.insert("recall".into(), json!(report.recall.value()));
        s.insert("strict_rag".into(), json!(report.strict_rag.value()));
    }
    if config.deflection {
        s.insert("deflection_f1".into(), json!(report.deflection.f1()));
    }
    s.insert("ms_per_token".into(), json!(report.ms_per_token));
    Ok(finish_partial(s, &outcomes, config.context_limit))
}

pub fn bench(ctx: &Context, a: &BenchArgs) -> Result<Finished, Failure> {
    let m = load(&a.input)?;
    let base = ctx.file.overlay(
        "decode",
        DecodeConfig {
            max_new_tokens: a.max_new_tokens,
            context_limit: a.context_limit,
            ..DecodeConfig::default()
        },
    )?;
    let prunings: &[bool] = match a.pruning {
        Pruning::On => &[true],
        Pruning::Off => &[false],
        Pruning::Both => &[true, false],
    };
    let mut variants = Vec::new();
    for &s in &a.strategies {
        let strategy = strategy(s);
        for &k in &a.ks {
            // pruning only changes the ensemble decoder
            let ps: &[bool] = if strategy == Strategy::Berag { prunings } else { &[false] };
            variants.extend(ps.iter().map(|&pruning| BenchVariant { strategy, k, pruning }));
        }
    }
    let meta = Meta::new(
        "bench",
        ctx.seed,
        json!({ "variants": variants, "decode": base, "warmup": a.warmup }),
        &inputs(&a.input),
    )?;
    let res = bench_latency(&m.backend, &m.head, &m.items, &variants, &base, a.warmup)?;
    let path = ctx.path("bench.csv");
    write_artifact(&path, (meta.csv_header() + &res.to_csv()).as_bytes())?;

    // pruned against unpruned answers, per K
    let mut agreement = Vec::new();
    for (i, v) in variants.iter().enumerate() {
        if !(v.strategy == Strategy::Berag && v.pruning) {
            continue;
        }
        if let Some(j) = variants
            .iter()
            .position(|w| w.strategy == Strategy::Berag && w.k == v.k && !w.pruning)
        {
            let same = res.answers[i].iter().zip(&res.answers[j]).filter(|(x, y)| x == y).count();
            agreement.push(json!({ "k": v.k, "identical": same, "items": m.items.len() }));
        }
    }
    let mut s = summary(&meta, &[("bench", &path)]);
    s.insert("rows".into(), serde_json::to_value(&res.rows).map_err(BeragError::from)?);
    s.insert("pruning_agreement".into(), json!(agreement));
    done(s)
}

pub fn rerank(ctx: &Context, a: &RerankArgs) -> Result<Finished, Failure> {
    let m = load(&a.input)?;
    let meta = Meta::new("rerank", ctx.seed, json!({ "cutoffs": a.cutoffs }), &inputs(&a.input))?;
    let report = rerank_recall(&m.backend, &m.head, &m.items, &a.cutoffs)?;
    let accuracy = relevance_accuracy(&m.backend, &m.head, &m.items)?;
    let path = ctx.path("rerank.csv");
    write_artifact(&path, (meta.csv_header() + &report.to_csv()).as_bytes())?;

    let mut s = summary(&meta, &[("rerank", &path)]);
    s.insert("cutoffs".into(), json!(report.cutoffs));
    s.insert("recall_before".into(), json!(report.before.iter().map(|r| r.value()).collect::<Vec<_>>()));
    s.insert("recall_after".into(), json!(report.after.iter().map(|r| r.value()).collect::<Vec<_>>()));
    s.insert("relevance_accuracy".into(), json!(accuracy.value()));
    done(s)
}

pub fn position_sweep(ctx: &Context, a: &SweepArgs) -> Result<Finished, Failure> {
    let m = load(&a.input)?;
    let config = ctx.file.overlay(
        "decode",
        DecodeConfig {
            k: a.k,
            max_new_tokens: a.max_new_tokens,
            context_limit: a.context_limit,
            ..DecodeConfig::default()
        },
    )?;
    let strategies: Vec<Strategy> = a.strategies.iter().map(|&s| strategy(s)).collect();
    let buckets = position_buckets(config.k, a.width);
    let meta = Meta::new(
        "position-sweep",
        ctx.seed,
        json!({ "strategies": strategies, "decode": config, "buckets": buckets }),
        &inputs(&a.input),
    )?;
    let report = berag::harness::position_sweep(&m.backend, &m.head, &m.items, &buckets, &strategies, &config, ctx.seed)?;
    let path = ctx.path("sweep.csv");
    write_artifact(&path, (meta.csv_header() + &report.to_csv()).as_bytes())?;

    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| {
            json!({
                "strategy": r.strategy,
                "accuracy": r.accuracy.iter().map(|x| x.value()).collect::<Vec<_>>(),
                "out_of_length": r.out_of_length,
                "outputs_constant": r.outputs_constant(),
            })
        })
        .collect();
    let mut s = summary(&meta, &[("sweep", &path)]);
    s.insert("buckets".into(), json!(report.buckets));
    s.insert("rows".into(), json!(rows));
    s.insert("excluded_items".into(), json!(report.excluded));
    done(s)
}
