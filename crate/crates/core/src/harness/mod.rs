//! Configuration, persistence, evaluation and baselines.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod histogram;
pub mod pipeline;

pub use baselines::{uniform_schedule, Baseline, BaselineController, MANUAL_PRESETS};
pub use checkpoint::{params_identical, CheckpointBundle, Section, FORMAT_VERSION};
pub use config::{parse_heads, RunConfig, KEYS};
pub use eval::{evaluate, retention, run_eval, save_report, EvalReport, EvalRow, EvalSpec, EvalSummary, Strategy, REPORT_HEADER};
pub use histogram::{bin_counts, write_histogram, HIST_EDGES};
pub use pipeline::{ablation, eval_spec, prepare, sweep_lambda, train_and_eval, write_sweep, Models, SweepRow, SWEEP_HEADER};
