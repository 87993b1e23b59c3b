//! Held-out evaluation of policies and baselines.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::harness::baselines::Baseline;
use crate::harness::histogram::write_histogram;
use crate::numerics::{mix_seed, Rng};
use crate::policy::{rollout, Controller, DegenerateController, HeadKind, PolicyController, PolicyHeads, Trajectory};
use crate::reward::Discriminator;
use crate::trainer::Env;

pub const REPORT_HEADER: &str = "prompt,noise_seed,K_step,K,K_rounded,reuse_steps,sparse_steps,q,d,wall_ms";

/// What drives the rollouts.
#[derive(Clone, Copy)]
pub enum Strategy<'a> {
    Reference,
    Policy { heads: &'a PolicyHeads, enabled: &'a BTreeSet<HeadKind> },
    Baseline(Baseline),
}

impl Strategy<'_> {
    pub fn label(&self) -> String {
        match self {
            Strategy::Reference => "reference".into(),
            Strategy::Policy { enabled, .. } => {
                format!("policy:{}", enabled.iter().map(|k| k.name()).collect::<Vec<_>>().join("+"))
            }
            Strategy::Baseline(b) => b.to_string(),
        }
    }
}

/// Prompt `i % vocab` with noise seed `mix_seed(seed, 2i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSpec {
    pub prompts: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub prompt: usize,
    pub noise_seed: u64,
    pub k_step: usize,
    pub k: f64,
    pub k_rounded: usize,
    pub reuse_steps: usize,
    pub sparse_steps: usize,
    pub q: f64,
    pub d: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub mean_k: f64,
    pub mean_q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub rows: Vec<EvalRow>,
    pub reference: Option<ReferenceSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub label: String,
    pub samples: usize,
    pub mean_k: f64,
    pub mean_kstep: f64,
    pub mean_q: f64,
    pub mean_d: Option<f64>,
    pub speedup: Option<f64>,
    pub q_retention: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// `1 + (q - q_ref) / |q_ref|`, which is `q / q_ref` whenever `q_ref > 0`
/// and stays monotone in `q` when the reference score is negative.
pub fn retention(q: f64, q_ref: f64) -> f64 {
    1.0 + (q - q_ref) / q_ref.abs()
}

impl EvalReport {
    pub fn mean_k(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.k))
    }

    pub fn mean_kstep(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.k_step as f64))
    }

    pub fn mean_q(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.q))
    }

    pub fn mean_d(&self) -> Option<f64> {
        let ds: Option<Vec<f64>> = self.rows.iter().map(|r| r.d).collect();
        ds.map(|d| mean(d.into_iter()))
    }

    /// Reference mean K over this run's mean K, i.e. `28 / mean K` against
    /// the full-step reference.
    pub fn speedup(&self) -> Option<f64> {
        self.reference.as_ref().map(|r| r.mean_k / self.mean_k())
    }

    pub fn q_retention(&self) -> Option<f64> {
        self.reference.as_ref().map(|r| retention(self.mean_q(), r.mean_q))
    }

    /// Attaches `reference`, which must cover the same prompts and noise.
    pub fn attach_reference(&mut self, reference: &EvalReport) -> Result<()> {
        let same = reference.rows.len() == self.rows.len()
            && reference.rows.iter().zip(&self.rows).all(|(a, b)| a.prompt == b.prompt && a.noise_seed == b.noise_seed);
        if !same {
            return invalid("reference run does not match the evaluated prompts and seeds");
        }
        self.reference = Some(ReferenceSummary { mean_k: reference.mean_k(), mean_q: reference.mean_q() });
        Ok(())
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            label: self.label.clone(),
            samples: self.rows.len(),
            mean_k: self.mean_k(),
            mean_kstep: self.mean_kstep(),
            mean_q: self.mean_q(),
            mean_d: self.mean_d(),
            speedup: self.speedup(),
            q_retention: self.q_retention(),
        }
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        for r in &self.rows {
            let d = r.d.map(|d| d.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{:.3}",
                r.prompt, r.noise_seed, r.k_step, r.k, r.k_rounded, r.reuse_steps, r.sparse_steps, r.q, d, r.wall_ms
            )?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead, label: &str) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != REPORT_HEADER {
            return Err(Error::Format(format!("unexpected report header {header:?}")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("report line {}: {line:?}", n + 2));
            if f.len() != 10 {
                return Err(bad());
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad());
            rows.push(EvalRow {
                prompt: int(f[0])?,
                noise_seed: f[1].parse().map_err(|_| bad())?,
                k_step: int(f[2])?,
                k: float(f[3])?,
                k_rounded: int(f[4])?,
                reuse_steps: int(f[5])?,
                sparse_steps: int(f[6])?,
                q: float(f[7])?,
                d: if f[8].is_empty() { None } else { Some(float(f[8])?) },
                wall_ms: float(f[9])?,
            });
        }
        Ok(Self { label: label.into(), rows, reference: None })
    }

    pub fn step_counts(&self) -> [Vec<usize>; 3] {
        [
            self.rows.iter().map(|r| r.k_step).collect(),
            self.rows.iter().map(|r| r.reuse_steps).collect(),
            self.rows.iter().map(|r| r.sparse_steps).collect(),
        ]
    }

    /// `histogram_{total,cache,sparse}.csv` in `dir`.
    pub fn write_histograms(&self, dir: &Path) -> Result<()> {
        if self.rows.is_empty() {
            return invalid("empty report");
        }
        std::fs::create_dir_all(dir)?;
        for (name, values) in ["total", "cache", "sparse"].iter().zip(self.step_counts()) {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("histogram_{name}.csv")))?);
            write_histogram(&mut f, &values)?;
            f.flush()?;
        }
        Ok(())
    }
}

fn controller<'a>(strategy: &Strategy<'a>, t_max: usize, seed: u64) -> Box<dyn Controller + 'a> {
    match *strategy {
        Strategy::Reference => Box::new(DegenerateController),
        Strategy::Policy { heads, enabled } => Box::new(PolicyController::new(heads, Rng::new(seed), enabled.clone())),
        Strategy::Baseline(b) => Box::new(b.controller(t_max)),
    }
}

/// Rolls out `strategy` on the spec's prompts and scores every image.
pub fn run_eval(
    env: Env,
    disc: Option<&Discriminator>,
    strategy: Strategy,
    spec: EvalSpec,
    cfg_scale: f64,
) -> Result<(EvalReport, Vec<Trajectory>)> {
    if spec.prompts == 0 {
        return invalid("evaluation needs at least one prompt");
    }
    let gcfg = env.gen.config();
    if let Strategy::Baseline(b) = strategy {
        b.validate(gcfg.t_max, env.cost.sparse.num_levels())?;
    }
    let runs: Vec<(Trajectory, f64)> = (0..spec.prompts as u64)
        .into_par_iter()
        .map(|i| {
            let mut ctl = controller(&strategy, gcfg.t_max, mix_seed(spec.seed, 2 * i + 1));
            let start = Instant::now();
            let t = rollout(env.gen, i as usize % gcfg.vocab, mix_seed(spec.seed, 2 * i), cfg_scale, env.cost, ctl.as_mut())?;
            Ok((t, start.elapsed().as_secs_f64() * 1e3))
        })
        .collect::<Result<_>>()?;
    let images: Vec<_> = runs.iter().map(|(t, _)| &t.image).collect();
    let prompts: Vec<usize> = runs.iter().map(|(t, _)| t.prompt).collect();
    let q = env.scorer.score_batch(&images, &prompts)?;
    let d = disc.map(|d| d.score_batch(&images)).transpose()?;
    let mut rows = Vec::with_capacity(runs.len());
    for (i, (t, ms)) in runs.iter().enumerate() {
        let (k, k_rounded) = t.ledger.equivalent_steps()?;
        rows.push(EvalRow {
            prompt: t.prompt,
            noise_seed: t.noise_seed,
            k_step: t.ledger.k_step(),
            k,
            k_rounded,
            reuse_steps: t.ledger.reuse_steps(),
            sparse_steps: t.ledger.sparse_steps(),
            q: q[i],
            d: d.as_ref().map(|d| d[i]),
            wall_ms: *ms,
        });
    }
    let report = EvalReport { label: strategy.label(), rows, reference: None };
    Ok((report, runs.into_iter().map(|(t, _)| t).collect()))
}

/// Evaluates `strategy` and the full-step reference on the same prompts.
pub fn evaluate(
    env: Env,
    disc: Option<&Discriminator>,
    strategy: Strategy,
    spec: EvalSpec,
    cfg_scale: f64,
) -> Result<EvalReport> {
    let (reference, _) = run_eval(env, disc, Strategy::Reference, spec, cfg_scale)?;
    let (mut report, _) = run_eval(env, disc, strategy, spec, cfg_scale)?;
    report.attach_reference(&reference)?;
    Ok(report)
}

pub fn save_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("eval_report.csv"))?);
    report.write_csv(&mut f)?;
    f.flush()?;
    let summary = serde_json::to_string_pretty(&report.summary()).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("eval_summary.json"), summary)?;
    Ok(())
}
