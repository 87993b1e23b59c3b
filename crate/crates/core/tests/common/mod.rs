#![allow(dead_code)]

use rapid3_core::numerics::{Bound, ParamStore, Rng, Tape, Tensor, Var};
use rapid3_core::Result;

/// Central-difference step for f64 graphs.
pub const FD_STEP: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Five-point central difference with spacing `FD_STEP`.
fn stencil(f: &mut impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let h = FD_STEP;
    Ok((8.0 * (f(h)? - f(-h)?) - (f(2.0 * h)? - f(-2.0 * h)?)) / (12.0 * h))
}

pub struct Leaf {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Leaf {
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Leaf { shape: shape.to_vec(), values: (0..n).map(|_| rng.normal() * std).collect() }
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Leaf { shape: shape.to_vec(), values: (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect() }
    }
}

/// Projects a node onto fixed random weights so every output entry
/// contributes to the scalar being differentiated.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out).len();
    if n == 1 {
        return Ok(out);
    }
    let mut rng = Rng::new(seed ^ 0x5eed);
    let w: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    tape.weighted_sum(out, &w)
}

/// Largest relative error between backward-mode and central-difference
/// gradients of `f` with respect to every entry of every leaf.
pub fn check_leaves(leaves: &[Leaf], seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let eval = |vals: &[Vec<f64>], grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::<f64>::new();
        let vars = leaves
            .iter()
            .zip(vals)
            .map(|(l, v)| tape.leaf_values(&l.shape, v.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let loss = project(&mut tape, out, seed)?;
        let value = tape.scalar(loss);
        if !grad {
            return Ok((value, None));
        }
        let g = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, x)| g.get(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]))
            .collect();
        Ok((value, Some(grads)))
    };
    let mut vals: Vec<Vec<f64>> = leaves.iter().map(|l| l.values.clone()).collect();
    let analytic = eval(&vals, true)?.1.expect("gradients");
    let mut worst = 0.0f64;
    for li in 0..vals.len() {
        for j in 0..vals[li].len() {
            let x0 = vals[li][j];
            let mut at = |dx: f64| -> Result<f64> {
                vals[li][j] = x0 + dx;
                let v = eval(&vals, false)?.0;
                vals[li][j] = x0;
                Ok(v)
            };
            let numeric = stencil(&mut at)?;
            worst = worst.max(rel_err(analytic[li][j], numeric));
        }
    }
    Ok(worst)
}

/// Same check for a model's parameters. `values` replace the stored
/// tensors (f64, so perturbations are exact); `coords` picks at most that
/// many entries per tensor.
pub fn check_params(
    store: &ParamStore,
    values: &[Vec<f64>],
    coords: usize,
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
) -> Result<f64> {
    let eval = |vals: &[Vec<f64>], grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::<f64>::new();
        let vars = store
            .tensors()
            .iter()
            .zip(vals)
            .map(|(t, v)| tape.leaf_values(t.shape(), v.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let bound = Bound::from_vars(store, vars.clone())?;
        let out = f(&mut tape, &bound)?;
        let loss = project(&mut tape, out, seed)?;
        let value = tape.scalar(loss);
        if !grad {
            return Ok((value, None));
        }
        let g = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, x)| g.get(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]))
            .collect();
        Ok((value, Some(grads)))
    };
    let mut vals = values.to_vec();
    let analytic = eval(&vals, true)?.1.expect("gradients");
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for ti in 0..vals.len() {
        let n = vals[ti].len();
        let picks: Vec<usize> = if n <= coords { (0..n).collect() } else { (0..coords).map(|_| rng.below(n)).collect() };
        for j in picks {
            let x0 = vals[ti][j];
            let mut at = |dx: f64| -> Result<f64> {
                vals[ti][j] = x0 + dx;
                let v = eval(&vals, false)?.0;
                vals[ti][j] = x0;
                Ok(v)
            };
            let numeric = stencil(&mut at)?;
            worst = worst.max(rel_err(analytic[ti][j], numeric));
        }
    }
    Ok(worst)
}

/// Random f64 values for every tensor of `store`.
pub fn random_values(store: &ParamStore, std: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    store.tensors().iter().map(|t| (0..t.len()).map(|_| rng.normal() * std).collect()).collect()
}

pub fn randn(shape: &[usize], std: f32, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut Rng::new(seed))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub mod fixture {
    use std::path::PathBuf;
    use std::sync::OnceLock;

    use rapid3_core::accel::CostModel;
    use rapid3_core::generator::{Generator, SyntheticSample};
    use rapid3_core::harness::{pipeline, CheckpointBundle, RunConfig};
    use rapid3_core::reward::QualityScorer;
    use rapid3_core::trainer::Env;

    /// Frozen generator and scorer of the reference setup (seed 0, defaults).
    pub struct Trained {
        pub cfg: RunConfig,
        pub data: Vec<SyntheticSample>,
        pub gen: Generator,
        pub scorer: QualityScorer,
        pub cost: CostModel,
    }

    impl Trained {
        pub fn env(&self) -> Env<'_> {
            Env { gen: &self.gen, scorer: &self.scorer, cost: &self.cost }
        }
    }

    fn cache_path(cfg: &RunConfig) -> PathBuf {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        cfg.to_kv().hash(&mut h);
        PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("reference-{:016x}.r3ck", h.finish()))
    }

    /// Trains once per configuration; later test binaries reuse the saved
    /// checkpoint. Delete the file to force retraining.
    pub fn reference() -> &'static Trained {
        static CELL: OnceLock<Trained> = OnceLock::new();
        CELL.get_or_init(|| {
            let cfg = RunConfig::default();
            let data = pipeline::dataset(&cfg).expect("dataset");
            let path = cache_path(&cfg);
            let (gen, scorer) = match CheckpointBundle::load(&path) {
                Ok(b) => (b.generator().expect("generator"), b.scorer().expect("scorer")),
                Err(_) => {
                    let m = pipeline::prepare(&cfg).expect("prepare");
                    let mut b = CheckpointBundle::new();
                    b.put_generator(&m.gen);
                    b.put_scorer(&m.scorer);
                    let tmp = path.with_extension("partial");
                    b.save(&tmp).expect("save fixture");
                    std::fs::rename(&tmp, &path).expect("publish fixture");
                    (m.gen, m.scorer)
                }
            };
            Trained { cost: cfg.cost.clone(), cfg, data, gen, scorer }
        })
    }
}
