//! End-to-end stages shared by the CLI and the tests.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::generator::{gen_dataset, train_generator, Generator, SyntheticSample};
use crate::harness::config::RunConfig;
use crate::harness::eval::{evaluate, EvalReport, EvalSpec, Strategy};
use crate::policy::HeadKind;
use crate::reward::QualityScorer;
use crate::trainer::{train, Env, TrainOutcome, TrainerConfig};

/// Frozen generator and quality scorer trained on the synthetic set.
pub struct Models {
    pub data: Vec<SyntheticSample>,
    pub gen: Generator,
    pub scorer: QualityScorer,
}

pub fn dataset(cfg: &RunConfig) -> Result<Vec<SyntheticSample>> {
    gen_dataset(cfg.data_size, cfg.generator.vocab, cfg.data_seed())
}

pub fn prepare(cfg: &RunConfig) -> Result<Models> {
    cfg.validate()?;
    let data = dataset(cfg)?;
    let (gen, _) = train_generator(&data, cfg.generator, &cfg.gen_train_config())?;
    let scorer = QualityScorer::train(&data, cfg.generator.vocab, &cfg.scorer_config())?;
    Ok(Models { data, gen, scorer })
}

pub fn eval_spec(cfg: &RunConfig) -> EvalSpec {
    EvalSpec { prompts: cfg.eval_prompts, seed: cfg.eval_seed() }
}

/// Trains with `tc` and evaluates the result on held-out prompts.
pub fn train_and_eval(
    env: Env,
    tc: &TrainerConfig,
    spec: EvalSpec,
    metrics: Option<&mut dyn Write>,
) -> Result<(TrainOutcome, EvalReport)> {
    let out = train(env, tc, None, metrics)?;
    let strategy = Strategy::Policy { heads: &out.heads, enabled: &tc.enabled };
    let report = evaluate(env, Some(&out.disc), strategy, spec, tc.cfg_scale)?;
    Ok((out, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_k: f64,
    pub mean_q: f64,
    pub mean_d: f64,
}

pub const SWEEP_HEADER: &str = "lambda,mean_K,mean_q,mean_d";

/// One trained policy per decay factor.
pub fn sweep_lambda(env: Env, tc: &TrainerConfig, lambdas: &[f64], spec: EvalSpec) -> Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let (_, rep) = train_and_eval(env, &TrainerConfig { lambda, ..tc.clone() }, spec, None)?;
            Ok(SweepRow { lambda, mean_k: rep.mean_k(), mean_q: rep.mean_q(), mean_d: rep.mean_d().unwrap_or(f64::NAN) })
        })
        .collect()
}

pub fn write_sweep(w: &mut impl Write, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.lambda, r.mean_k, r.mean_q, r.mean_d)?;
    }
    Ok(())
}

/// Trains and evaluates with only `strategies` active.
pub fn ablation(
    env: Env,
    tc: &TrainerConfig,
    strategies: &BTreeSet<HeadKind>,
    spec: EvalSpec,
) -> Result<(TrainOutcome, EvalReport)> {
    if strategies.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one strategy".into()));
    }
    train_and_eval(env, &TrainerConfig { enabled: strategies.clone(), ..tc.clone() }, spec, None)
}

pub fn write_file(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}
