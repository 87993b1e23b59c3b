//! Flat run configuration.
//!
//! Text form is one `key = value` per line, `#` starts a comment. JSON form is
//! a single object with the same keys. Unknown keys are an error.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::accel::CostModel;
use crate::error::{Error, Result};
use crate::generator::{GenTrainConfig, GeneratorConfig};
use crate::numerics::mix_seed;
use crate::policy::HeadKind;
use crate::reward::ScorerTrainConfig;
use crate::trainer::{AdvantageMode, TrainerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub gen_train: GenTrainConfig,
    pub scorer: ScorerTrainConfig,
    pub cost: CostModel,
    pub trainer: TrainerConfig,
    /// Samples in the synthetic training set.
    pub data_size: usize,
    /// Held-out prompts per evaluation.
    pub eval_prompts: usize,
    pub sweep_lambdas: Vec<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            gen_train: GenTrainConfig::default(),
            scorer: ScorerTrainConfig::default(),
            cost: CostModel::default(),
            trainer: TrainerConfig::default(),
            data_size: 2048,
            eval_prompts: 256,
            sweep_lambdas: vec![0.97, 0.90],
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed; sub-seeds derive from it"),
    ("out_dir", "directory for every artifact"),
    ("data.size", "synthetic training samples"),
    ("eval.prompts", "held-out prompts per evaluation"),
    ("gen.layers", "DiT blocks"),
    ("gen.heads", "attention heads"),
    ("gen.width", "hidden width"),
    ("gen.tokens", "latent tokens (2x2 patches of the 8x8 image)"),
    ("gen.vocab", "number of prompt classes"),
    ("gen.t_max", "timestep grid size"),
    ("gen_train.steps", "generator optimizer steps"),
    ("gen_train.batch", "generator batch"),
    ("gen_train.lr", "generator peak learning rate"),
    ("gen_train.label_dropout", "null-class probability"),
    ("scorer.steps", "quality scorer optimizer steps"),
    ("scorer.batch", "quality scorer batch"),
    ("scorer.lr", "quality scorer learning rate"),
    ("scorer.noise_batch", "noise images per scorer batch, trained toward a uniform class distribution"),
    ("cost.cache_saving", "C_cache on a reuse step"),
    ("cost.sparse_levels", "zeta1:zeta2 pairs, comma separated"),
    ("cost.sparse_costs", "nominal C_sparse per level, comma separated"),
    ("cost.measure", "derive C_sparse from skipped attention pairs"),
    ("cost.attention_share", "attention share of block FLOPs for measured costs"),
    ("trainer.group_size", "GRPO group size G"),
    ("trainer.prompts_per_iter", "prompt groups per policy update"),
    ("trainer.lr", "policy AdamW learning rate"),
    ("trainer.weight_decay", "policy AdamW decoupled weight decay"),
    ("trainer.clip_eps", "ratio clip range"),
    ("trainer.lambda", "reward decay factor"),
    ("trainer.omega", "discriminator weight in the reward"),
    ("trainer.q_offset", "constant added to q inside the reward"),
    ("trainer.advantage_mode", "grpo or rloo"),
    ("trainer.disc_steps_per_round", "discriminator steps per round"),
    ("trainer.policy_iters_per_round", "policy updates per round"),
    ("trainer.total_rounds", "rounds"),
    ("trainer.disc_lr", "discriminator learning rate"),
    ("trainer.disc_batch", "discriminator batch"),
    ("trainer.origin_size", "unaccelerated samples in the positive set"),
    ("trainer.accele_capacity", "capacity of the accelerated FIFO"),
    ("trainer.accele_init", "accelerated samples drawn before the first round"),
    ("trainer.shared_noise", "group members share the initial noise"),
    ("trainer.cfg_scale", "guidance scale, 0 disables guidance"),
    ("trainer.enabled", "active heads among step,cache,sparse"),
    ("sweep.lambdas", "decay factors for the sweep, comma separated"),
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect()
}

fn join<T: std::fmt::Display>(xs: impl IntoIterator<Item = T>, sep: &str) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

pub fn parse_heads(v: &str) -> Result<BTreeSet<HeadKind>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| HeadKind::parse(s).ok_or_else(|| Error::Config(format!("unknown head {s:?}"))))
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data.size" => self.data_size = num(key, v)?,
            "eval.prompts" => self.eval_prompts = num(key, v)?,
            "gen.layers" => self.generator.layers = num(key, v)?,
            "gen.heads" => self.generator.heads = num(key, v)?,
            "gen.width" => self.generator.width = num(key, v)?,
            "gen.tokens" => self.generator.tokens = num(key, v)?,
            "gen.vocab" => self.generator.vocab = num(key, v)?,
            "gen.t_max" => self.generator.t_max = num(key, v)?,
            "gen_train.steps" => self.gen_train.steps = num(key, v)?,
            "gen_train.batch" => self.gen_train.batch = num(key, v)?,
            "gen_train.lr" => self.gen_train.lr = num(key, v)?,
            "gen_train.label_dropout" => self.gen_train.label_dropout = num(key, v)?,
            "scorer.steps" => self.scorer.steps = num(key, v)?,
            "scorer.batch" => self.scorer.batch = num(key, v)?,
            "scorer.lr" => self.scorer.lr = num(key, v)?,
            "scorer.noise_batch" => self.scorer.noise_batch = num(key, v)?,
            "cost.cache_saving" => self.cost.cache_saving = num(key, v)?,
            "cost.sparse_levels" => {
                self.cost.sparse.levels = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|p| match p.split_once(':') {
                        Some((a, b)) => Ok((num(key, a)?, num(key, b)?)),
                        None => Err(Error::Config(format!("{key}: expected zeta1:zeta2, got {p:?}"))),
                    })
                    .collect::<Result<_>>()?
            }
            "cost.sparse_costs" => self.cost.sparse.nominal_costs = list(key, v)?,
            "cost.measure" => self.cost.measure = num(key, v)?,
            "cost.attention_share" => self.cost.attention_share = num(key, v)?,
            "trainer.group_size" => self.trainer.group_size = num(key, v)?,
            "trainer.prompts_per_iter" => self.trainer.prompts_per_iter = num(key, v)?,
            "trainer.lr" => self.trainer.lr = num(key, v)?,
            "trainer.weight_decay" => self.trainer.weight_decay = num(key, v)?,
            "trainer.clip_eps" => self.trainer.clip_eps = num(key, v)?,
            "trainer.lambda" => self.trainer.lambda = num(key, v)?,
            "trainer.omega" => self.trainer.omega = num(key, v)?,
            "trainer.q_offset" => self.trainer.q_offset = num(key, v)?,
            "trainer.advantage_mode" => {
                self.trainer.advantage_mode =
                    AdvantageMode::parse(v).ok_or_else(|| Error::Config(format!("{key}: unknown mode {v:?}")))?
            }
            "trainer.disc_steps_per_round" => self.trainer.disc_steps_per_round = num(key, v)?,
            "trainer.policy_iters_per_round" => self.trainer.policy_iters_per_round = num(key, v)?,
            "trainer.total_rounds" => self.trainer.total_rounds = num(key, v)?,
            "trainer.disc_lr" => self.trainer.disc_lr = num(key, v)?,
            "trainer.disc_batch" => self.trainer.disc_batch = num(key, v)?,
            "trainer.origin_size" => self.trainer.origin_size = num(key, v)?,
            "trainer.accele_capacity" => self.trainer.accele_capacity = num(key, v)?,
            "trainer.accele_init" => self.trainer.accele_init = num(key, v)?,
            "trainer.shared_noise" => self.trainer.shared_noise = num(key, v)?,
            "trainer.cfg_scale" => self.trainer.cfg_scale = num(key, v)?,
            "trainer.enabled" => self.trainer.enabled = parse_heads(v)?,
            "sweep.lambdas" => self.sweep_lambdas = list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.trainer;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "data.size" => self.data_size.to_string(),
            "eval.prompts" => self.eval_prompts.to_string(),
            "gen.layers" => self.generator.layers.to_string(),
            "gen.heads" => self.generator.heads.to_string(),
            "gen.width" => self.generator.width.to_string(),
            "gen.tokens" => self.generator.tokens.to_string(),
            "gen.vocab" => self.generator.vocab.to_string(),
            "gen.t_max" => self.generator.t_max.to_string(),
            "gen_train.steps" => self.gen_train.steps.to_string(),
            "gen_train.batch" => self.gen_train.batch.to_string(),
            "gen_train.lr" => self.gen_train.lr.to_string(),
            "gen_train.label_dropout" => self.gen_train.label_dropout.to_string(),
            "scorer.steps" => self.scorer.steps.to_string(),
            "scorer.batch" => self.scorer.batch.to_string(),
            "scorer.lr" => self.scorer.lr.to_string(),
            "scorer.noise_batch" => self.scorer.noise_batch.to_string(),
            "cost.cache_saving" => self.cost.cache_saving.to_string(),
            "cost.sparse_levels" => join(self.cost.sparse.levels.iter().map(|(a, b)| format!("{a}:{b}")), ","),
            "cost.sparse_costs" => join(&self.cost.sparse.nominal_costs, ","),
            "cost.measure" => self.cost.measure.to_string(),
            "cost.attention_share" => self.cost.attention_share.to_string(),
            "trainer.group_size" => t.group_size.to_string(),
            "trainer.prompts_per_iter" => t.prompts_per_iter.to_string(),
            "trainer.lr" => t.lr.to_string(),
            "trainer.weight_decay" => t.weight_decay.to_string(),
            "trainer.clip_eps" => t.clip_eps.to_string(),
            "trainer.lambda" => t.lambda.to_string(),
            "trainer.omega" => t.omega.to_string(),
            "trainer.q_offset" => t.q_offset.to_string(),
            "trainer.advantage_mode" => t.advantage_mode.name().to_string(),
            "trainer.disc_steps_per_round" => t.disc_steps_per_round.to_string(),
            "trainer.policy_iters_per_round" => t.policy_iters_per_round.to_string(),
            "trainer.total_rounds" => t.total_rounds.to_string(),
            "trainer.disc_lr" => t.disc_lr.to_string(),
            "trainer.disc_batch" => t.disc_batch.to_string(),
            "trainer.origin_size" => t.origin_size.to_string(),
            "trainer.accele_capacity" => t.accele_capacity.to_string(),
            "trainer.accele_init" => t.accele_init.to_string(),
            "trainer.shared_noise" => t.shared_noise.to_string(),
            "trainer.cfg_scale" => t.cfg_scale.to_string(),
            "trainer.enabled" => join(t.enabled.iter().map(|k| k.name()), ","),
            "sweep.lambdas" => join(&self.sweep_lambdas, ","),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        })
    }

    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("json: {e}")))?;
        let obj = value.as_object().ok_or_else(|| Error::Config("json config must be an object".into()))?;
        let mut cfg = Self::default();
        for (k, v) in obj {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                serde_json::Value::Array(xs) => join(
                    xs.iter().map(|x| match x {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    }),
                    ",",
                ),
                other => return Err(Error::Config(format!("{k}: unsupported value {other}"))),
            };
            cfg.set(k, &s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// JSON when the first non-blank character is `{`, key = value otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Self::parse_json(text)
        } else {
            Self::parse_kv(text)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, doc) in KEYS {
            let _ = writeln!(s, "# {doc}\n{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.cost.validate()?;
        self.trainer.validate()?;
        if self.data_size == 0 || self.eval_prompts == 0 {
            return Err(Error::Config("data.size and eval.prompts must be positive".into()));
        }
        if self.gen_train.steps == 0 || self.gen_train.batch == 0 || self.scorer.steps == 0 || self.scorer.batch == 0 {
            return Err(Error::Config("training steps and batches must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gen_train.label_dropout) {
            return Err(Error::Config("gen_train.label_dropout must lie in [0, 1]".into()));
        }
        if self.sweep_lambdas.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(Error::Config("sweep lambdas must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        mix_seed(self.seed, 1)
    }

    pub fn eval_seed(&self) -> u64 {
        mix_seed(self.seed, 2)
    }

    pub fn gen_train_config(&self) -> GenTrainConfig {
        GenTrainConfig { seed: mix_seed(self.seed, 3), ..self.gen_train }
    }

    pub fn scorer_config(&self) -> ScorerTrainConfig {
        ScorerTrainConfig { seed: mix_seed(self.seed, 4), ..self.scorer }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig { seed: mix_seed(self.seed, 5), ..self.trainer.clone() }
    }
}
