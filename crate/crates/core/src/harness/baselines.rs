//! Training-free schedules: uniform step reduction, a threshold cache and
//! fixed sparsity, alone or combined.

use std::fmt;

use crate::error::{Error, Result};
use crate::policy::{Controller, Decision, StepContext};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    FixedSteps(usize),
    /// Reuse while the accumulated relative latent change stays within `delta`.
    ThresholdCache(f64),
    FixedSparse(usize),
    Manual { steps: usize, delta: f64, level: usize },
}

/// Presets `manual-1`..`manual-3`.
pub const MANUAL_PRESETS: [(&str, Baseline); 3] = [
    ("manual-1", Baseline::Manual { steps: 21, delta: 0.15, level: 1 }),
    ("manual-2", Baseline::Manual { steps: 28, delta: 0.20, level: 1 }),
    ("manual-3", Baseline::Manual { steps: 26, delta: 0.12, level: 3 }),
];

impl Baseline {
    /// `fixed-steps:9`, `threshold-cache:0.15`, `fixed-sparse:2`,
    /// `manual:21,0.15,1` or a preset name. Parentheses work in place of `:`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((_, b)) = MANUAL_PRESETS.iter().find(|(n, _)| *n == s) {
            return Ok(*b);
        }
        let bad = || Error::Config(format!("unrecognized baseline {s:?}"));
        let (kind, arg) = match s.split_once(':') {
            Some(p) => p,
            None => {
                let (k, rest) = s.split_once('(').ok_or_else(bad)?;
                (k, rest.strip_suffix(')').ok_or_else(bad)?)
            }
        };
        let arg = arg.trim();
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let int = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        Ok(match kind.trim() {
            "fixed-steps" => Baseline::FixedSteps(int(arg)?),
            "threshold-cache" => Baseline::ThresholdCache(num(arg)?),
            "fixed-sparse" => Baseline::FixedSparse(int(arg)?),
            "manual" => {
                let parts: Vec<&str> = arg.split(',').collect();
                if parts.len() != 3 {
                    return Err(bad());
                }
                Baseline::Manual { steps: int(parts[0])?, delta: num(parts[1])?, level: int(parts[2])? }
            }
            _ => return Err(bad()),
        })
    }

    pub fn validate(&self, t_max: usize, levels: usize) -> Result<()> {
        let steps_ok = |n: usize| (1..=t_max).contains(&n);
        let delta_ok = |d: f64| d.is_finite() && d >= 0.0;
        let ok = match *self {
            Baseline::FixedSteps(n) => steps_ok(n),
            Baseline::ThresholdCache(d) => delta_ok(d),
            Baseline::FixedSparse(l) => l <= levels,
            Baseline::Manual { steps, delta, level } => steps_ok(steps) && delta_ok(delta) && level <= levels,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("baseline {self} is out of range")))
        }
    }

    pub fn controller(&self, t_max: usize) -> BaselineController {
        let (steps, delta, level) = match *self {
            Baseline::FixedSteps(n) => (n, None, 0),
            Baseline::ThresholdCache(d) => (t_max, Some(d), 0),
            Baseline::FixedSparse(l) => (t_max, None, l),
            Baseline::Manual { steps, delta, level } => (steps, Some(delta), level),
        };
        BaselineController { schedule: uniform_schedule(t_max, steps), delta, level, accumulated: 0.0 }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::FixedSteps(n) => write!(f, "fixed-steps:{n}"),
            Baseline::ThresholdCache(d) => write!(f, "threshold-cache:{d}"),
            Baseline::FixedSparse(l) => write!(f, "fixed-sparse:{l}"),
            Baseline::Manual { steps, delta, level } => write!(f, "manual:{steps},{delta},{level}"),
        }
    }
}

/// `t_k = round(T (n - k) / n)` for `k = 0..=n`.
pub fn uniform_schedule(t_max: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, t_max);
    (0..=n).map(|k| ((t_max * (n - k)) as f64 / n as f64).round() as usize).collect()
}

#[derive(Clone, Debug)]
pub struct BaselineController {
    schedule: Vec<usize>,
    delta: Option<f64>,
    level: usize,
    accumulated: f64,
}

impl Controller for BaselineController {
    fn cache(&mut self, ctx: &StepContext) -> Result<Decision> {
        let (Some(delta), Some(prev)) = (self.delta, ctx.x_prev) else {
            return Ok(Decision::forced(0));
        };
        if !ctx.cache.is_valid() {
            return Ok(Decision::forced(0));
        }
        let diff = ctx.x.sub(prev)?.sq_norm().sqrt();
        self.accumulated += diff / prev.sq_norm().sqrt().max(1e-12);
        if self.accumulated <= delta {
            Ok(Decision::forced(1))
        } else {
            self.accumulated = 0.0;
            Ok(Decision::forced(0))
        }
    }

    fn sparse(&mut self, _: &StepContext) -> Result<Decision> {
        Ok(Decision::forced(self.level))
    }

    fn step(&mut self, ctx: &StepContext) -> Result<Decision> {
        let next = self.schedule.iter().copied().find(|&s| s < ctx.t).unwrap_or(0);
        Ok(Decision::forced(next))
    }
}
