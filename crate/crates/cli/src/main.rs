//! `rapid3` command line.

use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rapid3_core::generator::{load_dataset, save_dataset, train_generator};
use rapid3_core::harness::{
    evaluate, parse_heads, pipeline, save_report, sweep_lambda, write_sweep, Baseline, CheckpointBundle, EvalReport,
    RunConfig, Strategy,
};
use rapid3_core::reward::QualityScorer;
use rapid3_core::trainer::{train, Env};

#[derive(Parser, Debug)]
#[command(name = "rapid3", version, about = "Learned step, cache and sparse-attention policies for a toy DiT")]
struct Cli {
    /// Run configuration (key = value lines or a JSON object).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset to `<out>/data.r3ds`.
    GenData {
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the generator and store it frozen in the checkpoint.
    TrainGen {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the quality scorer and store it in the checkpoint.
    PretrainScorer {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Adversarial policy training; writes `metrics.csv`.
    TrainPolicy {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Active heads, e.g. `step,cache`.
        #[arg(long)]
        heads: Option<String>,
    },
    /// Evaluate the trained policy against the full-step reference.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate one policy per decay factor; writes `sweep.csv`.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated decay factors, overrides `sweep.lambdas`.
        #[arg(long)]
        lambdas: Option<String>,
    },
    /// Evaluate a training-free schedule such as `fixed-steps:9` or `manual-1`.
    Baseline {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Step-count histograms from an evaluation report.
    Histogram {
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<rapid3_core::Error> for Failure {
    fn from(e: rapid3_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("missing {what}: {} does not exist", path.display())))
    }
}

struct Ctx {
    cfg: RunConfig,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn checkpoint(&self, p: &Option<PathBuf>) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out("model.r3ck"))
    }

    fn data(&self, p: &Option<PathBuf>) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out("data.r3ds"))
    }

    /// Existing bundle, or an empty one when the file is absent.
    fn bundle_or_new(&self, path: &Path) -> anyhow::Result<CheckpointBundle> {
        if path.exists() {
            CheckpointBundle::load(path).with_context(|| format!("reading {}", path.display()))
        } else {
            Ok(CheckpointBundle::new())
        }
    }

    fn bundle_with(&self, path: &Path, sections: &[&str]) -> Result<CheckpointBundle, Failure> {
        require(path, "checkpoint")?;
        let b = CheckpointBundle::load(path).with_context(|| format!("reading {}", path.display()))?;
        for s in sections {
            if b.section(s).is_none() {
                return Err(usage(format!("missing {s} in checkpoint {}", path.display())));
            }
        }
        Ok(b)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require(p, "config file")?;
            RunConfig::load(p).map_err(|e| usage(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(&cli)?;
    let ctx = Ctx { cfg };
    let cfg = &ctx.cfg;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    match &cli.command {
        Command::GenData { size } => {
            let mut c = cfg.clone();
            if let Some(n) = size {
                c.data_size = *n;
            }
            c.validate().map_err(|e| usage(e.to_string()))?;
            let data = pipeline::dataset(&c)?;
            let path = ctx.out("data.r3ds");
            save_dataset(&path, &data, c.generator.vocab)?;
            println!("wrote {} samples to {}", data.len(), path.display());
        }
        Command::TrainGen { data, checkpoint } => {
            let dpath = ctx.data(data);
            require(&dpath, "dataset")?;
            let (samples, vocab) = load_dataset(&dpath)?;
            if vocab != cfg.generator.vocab {
                return Err(usage(format!("dataset has {vocab} classes, config expects {}", cfg.generator.vocab)));
            }
            let (gen, report) = train_generator(&samples, cfg.generator, &cfg.gen_train_config())?;
            let cpath = ctx.checkpoint(checkpoint);
            let mut b = ctx.bundle_or_new(&cpath)?;
            b.put_generator(&gen);
            b.save(&cpath)?;
            println!("generator: {} params, final loss {:.4}", gen.num_params(), report.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::PretrainScorer { data, checkpoint } => {
            let dpath = ctx.data(data);
            require(&dpath, "dataset")?;
            let (samples, vocab) = load_dataset(&dpath)?;
            let scorer = QualityScorer::train(&samples, vocab, &cfg.scorer_config())?;
            let cpath = ctx.checkpoint(checkpoint);
            let mut b = ctx.bundle_or_new(&cpath)?;
            b.put_scorer(&scorer);
            b.save(&cpath)?;
            println!("scorer stored in {}", cpath.display());
        }
        Command::TrainPolicy { checkpoint, heads } => {
            let cpath = ctx.checkpoint(checkpoint);
            let mut b = ctx.bundle_with(&cpath, &["generator", "scorer"])?;
            let (gen, scorer) = (b.generator()?, b.scorer()?);
            let mut tc = cfg.trainer_config();
            if let Some(h) = heads {
                tc.enabled = parse_heads(h).map_err(|e| usage(e.to_string()))?;
            }
            tc.validate().map_err(|e| usage(e.to_string()))?;
            let env = Env { gen: &gen, scorer: &scorer, cost: &cfg.cost };
            let mut metrics = std::io::BufWriter::new(std::fs::File::create(ctx.out("metrics.csv"))?);
            let out = train(env, &tc, None, Some(&mut metrics))?;
            drop(metrics);
            b.put_policy(&out.heads, &tc.enabled);
            b.put_discriminator(&out.disc);
            b.save(&cpath)?;
            if let Some(r) = out.rounds.last() {
                println!("final round: mean K {:.3}, mean q {:.4}, mean d {:.3}", r.mean_k, r.mean_q, r.mean_d);
            }
        }
        Command::Eval { checkpoint } => {
            let cpath = ctx.checkpoint(checkpoint);
            let b = ctx.bundle_with(&cpath, &["generator", "scorer", "policy_step", "policy_cache", "policy_sparse"])?;
            let (gen, scorer, heads) = (b.generator()?, b.scorer()?, b.heads()?);
            let enabled = b.enabled_heads()?;
            let disc = match b.section("discriminator") {
                Some(_) => Some(b.discriminator(cfg.trainer.disc_lr, cfg.trainer.disc_batch)?),
                None => None,
            };
            let env = Env { gen: &gen, scorer: &scorer, cost: &cfg.cost };
            let strategy = Strategy::Policy { heads: &heads, enabled: &enabled };
            let report = evaluate(env, disc.as_ref(), strategy, pipeline::eval_spec(cfg), cfg.trainer.cfg_scale)?;
            finish_report(&report, &cfg.out_dir)?;
        }
        Command::Sweep { checkpoint, lambdas } => {
            let cpath = ctx.checkpoint(checkpoint);
            let b = ctx.bundle_with(&cpath, &["generator", "scorer"])?;
            let (gen, scorer) = (b.generator()?, b.scorer()?);
            let lambdas: Vec<f64> = match lambdas {
                Some(s) => s
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| usage(format!("bad lambda {v:?}"))))
                    .collect::<Result<_, _>>()?,
                None => cfg.sweep_lambdas.clone(),
            };
            if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
                return Err(usage("lambdas must lie in (0, 1)"));
            }
            let env = Env { gen: &gen, scorer: &scorer, cost: &cfg.cost };
            let rows = sweep_lambda(env, &cfg.trainer_config(), &lambdas, pipeline::eval_spec(cfg))?;
            pipeline::write_file(&ctx.out("sweep.csv"), |w| write_sweep(w, &rows))?;
            for r in &rows {
                println!("lambda {}: mean K {:.3}, mean q {:.4}", r.lambda, r.mean_k, r.mean_q);
            }
        }
        Command::Baseline { kind, checkpoint } => {
            let baseline = Baseline::parse(kind).map_err(|e| usage(e.to_string()))?;
            let cpath = ctx.checkpoint(checkpoint);
            let b = ctx.bundle_with(&cpath, &["generator", "scorer"])?;
            let (gen, scorer) = (b.generator()?, b.scorer()?);
            baseline
                .validate(gen.config().t_max, cfg.cost.sparse.num_levels())
                .map_err(|e| usage(e.to_string()))?;
            let env = Env { gen: &gen, scorer: &scorer, cost: &cfg.cost };
            let report =
                evaluate(env, None, Strategy::Baseline(baseline), pipeline::eval_spec(cfg), cfg.trainer.cfg_scale)?;
            finish_report(&report, &cfg.out_dir)?;
        }
        Command::Histogram { report } => {
            let rpath = report.clone().unwrap_or_else(|| ctx.out("eval_report.csv"));
            require(&rpath, "evaluation report")?;
            let f = std::fs::File::open(&rpath)?;
            let rep = EvalReport::read_csv(BufReader::new(f), "report")?;
            rep.write_histograms(&cfg.out_dir)?;
            println!("histograms written to {}", cfg.out_dir.display());
        }
    }
    Ok(())
}

fn finish_report(report: &EvalReport, dir: &Path) -> anyhow::Result<()> {
    save_report(report, dir)?;
    report.write_histograms(dir)?;
    let s = report.summary();
    println!(
        "{}: {} samples, mean K {:.3}, speedup {:.3}, mean q {:.4}, q retention {:.3}",
        s.label,
        s.samples,
        s.mean_k,
        s.speedup.unwrap_or(f64::NAN),
        s.mean_q,
        s.q_retention.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("RAPID3_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `rapid3 --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
