mod common;

use std::collections::BTreeSet;

use rapid3_core::harness::{
    bin_counts, retention, run_eval, uniform_schedule, write_histogram, write_sweep, Baseline, CheckpointBundle,
    EvalReport, EvalRow, EvalSpec, RunConfig, Strategy, SweepRow, FORMAT_VERSION, HIST_EDGES, KEYS, MANUAL_PRESETS,
    REPORT_HEADER,
};
use rapid3_core::numerics::Rng;
use rapid3_core::policy::{HeadConfig, HeadKind, PolicyHeads};
use rapid3_core::reward::Discriminator;
use rapid3_core::trainer::TrainerConfig;
use rapid3_core::Error;

const SPEC: EvalSpec = EvalSpec { prompts: 16, seed: 404 };

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("harness").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn random_rows(n: usize, seed: u64) -> Vec<EvalRow> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let k_step = 1 + rng.below(28);
            EvalRow {
                prompt: i % 8,
                noise_seed: rng.next_u64(),
                k_step,
                k: k_step as f64 * (0.05 + 0.95 * rng.uniform()),
                k_rounded: 1 + rng.below(k_step),
                reuse_steps: rng.below(k_step),
                sparse_steps: rng.below(k_step),
                q: -rng.uniform(),
                d: if seed % 2 == 0 { Some(rng.uniform()) } else { None },
                wall_ms: (rng.uniform() * 1e3 * 1e3).round() / 1e3,
            }
        })
        .collect()
}

#[test]
fn config_defaults() {
    let cfg = RunConfig::default();
    let tc = &cfg.trainer;
    assert_eq!(tc.lr, 1e-5);
    assert_eq!(tc.weight_decay, 0.1);
    assert_eq!(tc.group_size, 4);
    assert_eq!(tc.group_size * tc.prompts_per_iter, 128);
    assert_eq!((tc.lambda, tc.omega, tc.clip_eps), (0.97, 1.0, 0.2));
    assert_eq!(cfg.cost.cache_saving, 0.95);
    assert_eq!(cfg.cost.sparse.levels, vec![(0.07, 0.08), (0.10, 0.11), (0.20, 0.21)]);
    assert_eq!(cfg.cost.sparse.nominal_costs, vec![0.05, 0.07, 0.10]);
    assert_eq!(cfg.sweep_lambdas, vec![0.97, 0.90]);
    assert_eq!(cfg.eval_prompts, 256);
    assert_eq!(cfg.generator.t_max, 28);
    let derived = cfg.trainer_config();
    assert_eq!(TrainerConfig { seed: tc.seed, ..derived.clone() }, *tc);
    assert_ne!(derived.seed, RunConfig { seed: 1, ..cfg.clone() }.trainer_config().seed);
    assert!(cfg.validate().is_ok());
}

#[test]
fn config_rejects_unknown_keys() {
    assert!(matches!(RunConfig::parse_kv("trainer.lr = 1e-4\nno.such_key = 3\n"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse_json(r#"{"trainer.lr": 1e-4, "bogus": 1}"#), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse("lambda = 0.9"), Err(Error::Config(_))));
    assert!(RunConfig::default().get("trainer.nope").is_err());
    assert!(RunConfig::parse_kv("trainer.lr 1e-4").is_err());
    assert!(RunConfig::parse_kv("trainer.group_size = one").is_err());
    assert!(RunConfig::parse_kv("trainer.group_size = 1").is_err());
    assert!(RunConfig::parse_kv("trainer.enabled = step,warp").is_err());
    assert!(RunConfig::parse_json("[1, 2]").is_err());
}

#[test]
fn config_text_and_json_agree() {
    let kv = "# desk run\nseed = 3\ntrainer.lr = 0.003   # faster\ntrainer.enabled = step,cache\n\
              cost.sparse_costs = 0.04,0.06,0.09\nsweep.lambdas = 0.95,0.8\ntrainer.advantage_mode = rloo\n";
    let json = r#"{"seed": 3, "trainer.lr": 0.003, "trainer.enabled": ["step", "cache"],
                   "cost.sparse_costs": [0.04, 0.06, 0.09], "sweep.lambdas": "0.95,0.8",
                   "trainer.advantage_mode": "rloo"}"#;
    let a = RunConfig::parse(kv).unwrap();
    let b = RunConfig::parse(json).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seed, 3);
    assert_eq!(a.trainer.lr, 0.003);
    assert_eq!(a.trainer.enabled, [HeadKind::Step, HeadKind::Cache].into_iter().collect::<BTreeSet<_>>());
    assert_eq!(a.sweep_lambdas, vec![0.95, 0.8]);
    assert_eq!(a.cost.sparse.nominal_costs, vec![0.04, 0.06, 0.09]);
}

#[test]
fn config_round_trips_through_text() {
    let mut cfg = RunConfig::default();
    cfg.set("trainer.lambda", "0.9").unwrap();
    cfg.set("trainer.shared_noise", "true").unwrap();
    cfg.set("data.size", "300").unwrap();
    cfg.set("out_dir", "runs/a").unwrap();
    let text = cfg.to_kv();
    let back = RunConfig::parse(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_kv(), text);
    for (k, doc) in KEYS {
        assert!(!doc.is_empty());
        let v = cfg.get(k).unwrap();
        let mut c = RunConfig::default();
        c.set(k, &v).unwrap();
        assert_eq!(c.get(k).unwrap(), v, "{k}");
    }
}

#[test]
fn config_file_loading() {
    let dir = scratch("config");
    let p = dir.join("run.cfg");
    std::fs::write(&p, "trainer.total_rounds = 2\n").unwrap();
    assert_eq!(RunConfig::load(&p).unwrap().trainer.total_rounds, 2);
    assert!(RunConfig::load(&dir.join("absent.cfg")).is_err());
}

fn full_bundle() -> CheckpointBundle {
    let fx = common::fixture::reference();
    let mut heads = PolicyHeads::new(HeadConfig::for_generator(&fx.gen.config(), 3), 9);
    let mut rng = Rng::new(9);
    let store = heads.params_mut();
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += (0.3 * rng.normal()) as f32);
    }
    let enabled: BTreeSet<HeadKind> = [HeadKind::Step, HeadKind::Sparse].into_iter().collect();
    let mut b = CheckpointBundle::new();
    b.put_generator(&fx.gen);
    b.put_policy(&heads, &enabled);
    b.put_scorer(&fx.scorer);
    b.put_discriminator(&Discriminator::new(4, 1e-3, 8));
    b
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let fx = common::fixture::reference();
    let b = full_bundle();
    for name in ["generator", "policy_step", "policy_cache", "policy_sparse", "discriminator", "scorer"] {
        assert!(b.section(name).is_some(), "{name}");
    }
    let dir = scratch("checkpoint");
    let (p1, p2) = (dir.join("a.r3ck"), dir.join("b.r3ck"));
    b.save(&p1).unwrap();
    let loaded = CheckpointBundle::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    let (x, y) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(x, y);
    assert_eq!(&x[..4], b"R3CK");
    assert_eq!(u32::from_le_bytes(x[4..8].try_into().unwrap()), FORMAT_VERSION);

    let gen = loaded.generator().unwrap();
    assert!(gen.params().bitwise_eq(fx.gen.params()));
    assert_eq!(gen.config(), fx.gen.config());
    assert_eq!(loaded.heads().unwrap().params().entries().len(), b.heads().unwrap().params().entries().len());
    assert!(loaded.heads().unwrap().params().bitwise_eq(b.heads().unwrap().params()));
    assert_eq!(loaded.enabled_heads().unwrap(), [HeadKind::Step, HeadKind::Sparse].into_iter().collect());
    let im = &fx.data[0].image;
    assert_eq!(loaded.scorer().unwrap().score(im, 1).unwrap(), fx.scorer.score(im, 1).unwrap());
    let d0 = Discriminator::new(4, 1e-3, 8);
    assert!(loaded.discriminator(1e-3, 8).unwrap().net().params().bitwise_eq(d0.net().params()));
}

#[test]
fn checkpoint_corruption_is_detected() {
    let bytes = full_bundle().to_bytes();
    assert!(CheckpointBundle::from_bytes(&bytes).is_ok());
    for at in [10, bytes.len() / 2, bytes.len() - 5] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        assert!(CheckpointBundle::from_bytes(&bad).is_err(), "flip at {at}");
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(CheckpointBundle::from_bytes(&magic).is_err());
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(CheckpointBundle::from_bytes(&version).is_err());
    assert!(CheckpointBundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(CheckpointBundle::from_bytes(&trailing).is_err());
    assert!(CheckpointBundle::from_bytes(&[]).is_err());
    assert!(CheckpointBundle::new().heads().is_err());
}

#[test]
fn report_aggregates_recompute_from_rows() {
    for seed in 0..20u64 {
        let rows = random_rows(1 + seed as usize * 7, seed);
        let n = rows.len() as f64;
        let mut reference = EvalReport { label: "ref".into(), rows: rows.clone(), reference: None };
        for r in &mut reference.rows {
            r.k = 28.0;
            r.q -= 0.01;
        }
        let mut rep = EvalReport { label: "x".into(), rows: rows.clone(), reference: None };
        assert_eq!(rep.speedup(), None);
        rep.attach_reference(&reference).unwrap();

        let mean_k = rows.iter().map(|r| r.k).sum::<f64>() / n;
        let mean_q = rows.iter().map(|r| r.q).sum::<f64>() / n;
        let ref_q = reference.rows.iter().map(|r| r.q).sum::<f64>() / n;
        let s = rep.summary();
        assert!((s.mean_k - mean_k).abs() < 1e-12);
        assert!((s.mean_kstep - rows.iter().map(|r| r.k_step as f64).sum::<f64>() / n).abs() < 1e-12);
        assert!((s.mean_q - mean_q).abs() < 1e-12);
        assert!((s.speedup.unwrap() - 28.0 / mean_k).abs() < 1e-9);
        assert!((s.q_retention.unwrap() - (1.0 + (mean_q - ref_q) / ref_q.abs())).abs() < 1e-9);
        assert_eq!(s.samples, rows.len());
        match s.mean_d {
            Some(d) => assert!((d - rows.iter().map(|r| r.d.unwrap()).sum::<f64>() / n).abs() < 1e-12),
            None => assert!(rows.iter().all(|r| r.d.is_none())),
        }

        let mut other = rows.clone();
        other[0].noise_seed ^= 1;
        let mut mismatched = EvalReport { label: "y".into(), rows: other, reference: None };
        assert!(mismatched.attach_reference(&reference).is_err());
        assert!(mismatched.speedup().is_none());
    }
    assert_eq!(retention(-0.5, -0.5), 1.0);
    assert!((retention(0.45, 0.5) - 0.9).abs() < 1e-12);
    assert!((retention(-0.55, -0.5) - 0.9).abs() < 1e-12);
}

#[test]
fn report_csv_round_trip() {
    for seed in [0u64, 1] {
        let rep = EvalReport { label: "run".into(), rows: random_rows(40, seed), reference: None };
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), REPORT_HEADER);
        assert_eq!(text.lines().count(), 41);
        let back = EvalReport::read_csv(&buf[..], "run").unwrap();
        assert_eq!(back, rep);
    }
    assert!(EvalReport::read_csv(&b"prompt,K\n1,2\n"[..], "x").is_err());
    let short = format!("{REPORT_HEADER}\n1,2,3\n");
    assert!(EvalReport::read_csv(short.as_bytes(), "x").is_err());
}

#[test]
fn histogram_bins_sum_to_count() {
    let mut rng = Rng::new(6);
    for n in [1, 5, 100, 1000] {
        let vals: Vec<usize> = (0..n).map(|_| rng.below(40)).collect();
        let counts = bin_counts(&vals);
        assert_eq!(counts.len(), HIST_EDGES.len() - 1);
        assert_eq!(counts.iter().sum::<usize>(), n);
        for (b, &c) in counts.iter().enumerate() {
            let lo = HIST_EDGES[b];
            let hi = HIST_EDGES[b + 1];
            let last = b == counts.len() - 1;
            assert_eq!(c, vals.iter().filter(|&&v| v >= lo && (v < hi || last)).count());
        }
    }
    assert_eq!(HIST_EDGES, [0, 2, 4, 8, 12, 16, 20, 24, 28]);
    let mut buf = Vec::new();
    write_histogram(&mut buf, &[0, 3, 28]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "bin_lo,bin_hi,count");
    assert_eq!(text.lines().count(), 9);
    assert!(write_histogram(&mut Vec::new(), &[]).is_err());
}

fn read_hist(path: &std::path::Path) -> Vec<usize> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn reference_histograms_concentrate_at_zero() {
    let fx = common::fixture::reference();
    let (rep, _) = run_eval(fx.env(), None, Strategy::Reference, SPEC, 0.0).unwrap();
    let dir = scratch("hist");
    rep.write_histograms(&dir).unwrap();
    let total = read_hist(&dir.join("histogram_total.csv"));
    let cache = read_hist(&dir.join("histogram_cache.csv"));
    let sparse = read_hist(&dir.join("histogram_sparse.csv"));
    for h in [&total, &cache, &sparse] {
        assert_eq!(h.iter().sum::<usize>(), SPEC.prompts);
    }
    assert_eq!(cache[0], SPEC.prompts);
    assert_eq!(sparse[0], SPEC.prompts);
    assert_eq!(*total.last().unwrap(), SPEC.prompts);
    let empty = EvalReport { label: "e".into(), rows: vec![], reference: None };
    assert!(empty.write_histograms(&dir).is_err());
}

#[test]
fn baseline_parsing() {
    assert_eq!(Baseline::parse("fixed-steps:9").unwrap(), Baseline::FixedSteps(9));
    assert_eq!(Baseline::parse("fixed-steps(9)").unwrap(), Baseline::FixedSteps(9));
    assert_eq!(Baseline::parse("threshold-cache(0.15)").unwrap(), Baseline::ThresholdCache(0.15));
    assert_eq!(Baseline::parse("fixed-sparse:2").unwrap(), Baseline::FixedSparse(2));
    assert_eq!(
        Baseline::parse("manual(21, 0.15, 1)").unwrap(),
        Baseline::Manual { steps: 21, delta: 0.15, level: 1 }
    );
    for (name, b) in MANUAL_PRESETS {
        assert_eq!(Baseline::parse(name).unwrap(), b);
        assert_eq!(Baseline::parse(&b.to_string()).unwrap(), b);
        assert!(b.validate(28, 3).is_ok());
    }
    for bad in ["fixed-steps", "fixed-steps:x", "warp:3", "manual:1,2", "fixed-steps(9"] {
        assert!(matches!(Baseline::parse(bad), Err(Error::Config(_))), "{bad}");
    }
    for b in [
        Baseline::FixedSteps(0),
        Baseline::FixedSteps(29),
        Baseline::ThresholdCache(-0.1),
        Baseline::ThresholdCache(f64::NAN),
        Baseline::FixedSparse(4),
        Baseline::Manual { steps: 9, delta: 0.1, level: 5 },
    ] {
        assert!(b.validate(28, 3).is_err(), "{b}");
    }
}

#[test]
fn uniform_schedules() {
    assert_eq!(uniform_schedule(28, 28), (0..=28).rev().collect::<Vec<_>>());
    assert_eq!(uniform_schedule(28, 1), vec![28, 0]);
    for n in 1..=28 {
        let s = uniform_schedule(28, n);
        assert_eq!(s.len(), n + 1);
        assert_eq!((s[0], s[n]), (28, 0));
        assert!(s.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn fixed_steps_28_is_the_reference() {
    let fx = common::fixture::reference();
    let (reference, ref_traj) = run_eval(fx.env(), None, Strategy::Reference, SPEC, 0.0).unwrap();
    let (mut rep, traj) = run_eval(fx.env(), None, Strategy::Baseline(Baseline::FixedSteps(28)), SPEC, 0.0).unwrap();
    rep.attach_reference(&reference).unwrap();
    assert_eq!(rep.speedup().unwrap(), 1.0);
    assert_eq!(rep.q_retention().unwrap(), 1.0);
    for (a, b) in traj.iter().zip(&ref_traj) {
        assert!(a.image.bit_eq(&b.image));
    }
    for (a, b) in rep.rows.iter().zip(&reference.rows) {
        assert_eq!((a.k, a.k_step, a.q.to_bits()), (b.k, b.k_step, b.q.to_bits()));
    }
}

#[test]
fn fixed_steps_9_speedup() {
    let fx = common::fixture::reference();
    let (reference, _) = run_eval(fx.env(), None, Strategy::Reference, SPEC, 0.0).unwrap();
    let (mut rep, _) = run_eval(fx.env(), None, Strategy::Baseline(Baseline::FixedSteps(9)), SPEC, 0.0).unwrap();
    rep.attach_reference(&reference).unwrap();
    assert!(rep.rows.iter().all(|r| r.k == 9.0 && r.k_rounded == 9 && r.k_step == 9));
    assert!((rep.speedup().unwrap() - 28.0 / 9.0).abs() < 1e-9);
    assert_eq!(rep.label, "fixed-steps:9");
}

#[test]
fn zero_threshold_never_reuses() {
    let fx = common::fixture::reference();
    let (rep, _) = run_eval(fx.env(), None, Strategy::Baseline(Baseline::ThresholdCache(0.0)), SPEC, 0.0).unwrap();
    assert!(rep.rows.iter().all(|r| r.reuse_steps == 0 && r.k == r.k_step as f64 && r.k_step == 28));

    let (loose, _) = run_eval(fx.env(), None, Strategy::Baseline(Baseline::ThresholdCache(0.3)), SPEC, 0.0).unwrap();
    assert!(loose.rows.iter().all(|r| r.k_step == 28 && r.k <= 28.0));
    assert!(loose.rows.iter().any(|r| r.reuse_steps > 0));
    assert!(loose.mean_k() < 28.0);
}

#[test]
fn fixed_sparse_prices_every_step() {
    let fx = common::fixture::reference();
    let (rep, _) = run_eval(fx.env(), None, Strategy::Baseline(Baseline::FixedSparse(2)), SPEC, 0.0).unwrap();
    for r in &rep.rows {
        assert_eq!((r.k_step, r.sparse_steps, r.reuse_steps), (28, 28, 0));
        assert!((r.k - 28.0 * 0.93).abs() < 1e-9);
    }
}

#[test]
fn manual_presets_emit_valid_reports() {
    let fx = common::fixture::reference();
    let disc = Discriminator::new(2, 1e-3, 8);
    let (reference, _) = run_eval(fx.env(), Some(&disc), Strategy::Reference, SPEC, 0.0).unwrap();
    for (name, b) in MANUAL_PRESETS {
        let (mut rep, _) = run_eval(fx.env(), Some(&disc), Strategy::Baseline(b), SPEC, 0.0).unwrap();
        rep.attach_reference(&reference).unwrap();
        assert_eq!(rep.rows.len(), SPEC.prompts, "{name}");
        let Baseline::Manual { steps, .. } = b else { unreachable!() };
        for r in &rep.rows {
            assert!(r.k_step == steps && r.k > 0.0 && r.k <= r.k_step as f64);
            assert!(r.reuse_steps < r.k_step && r.sparse_steps + r.reuse_steps <= r.k_step);
            assert!(r.q.is_finite() && r.q <= 0.0 && r.d == Some(0.5));
        }
        assert!(rep.speedup().unwrap() > 1.0);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert_eq!(EvalReport::read_csv(&buf[..], &rep.label).unwrap().rows.len(), SPEC.prompts);
    }
    let bad = Strategy::Baseline(Baseline::FixedSparse(7));
    assert!(run_eval(fx.env(), None, bad, SPEC, 0.0).is_err());
    assert!(run_eval(fx.env(), None, Strategy::Reference, EvalSpec { prompts: 0, seed: 1 }, 0.0).is_err());
}

#[test]
fn eval_is_deterministic() {
    let fx = common::fixture::reference();
    let heads = PolicyHeads::new(HeadConfig::for_generator(&fx.gen.config(), 3), 1);
    let enabled: BTreeSet<HeadKind> = HeadKind::ALL.into_iter().collect();
    let strat = Strategy::Policy { heads: &heads, enabled: &enabled };
    let (a, _) = run_eval(fx.env(), None, strat, SPEC, 0.0).unwrap();
    let (b, _) = run_eval(fx.env(), None, strat, SPEC, 0.0).unwrap();
    assert!(a.rows.iter().zip(&b.rows).all(|(x, y)| x.k == y.k && x.q.to_bits() == y.q.to_bits()));
    assert_eq!(a.label, "policy:step+cache+sparse");
    let rows: Vec<(usize, u64)> = a.rows.iter().map(|r| (r.prompt, r.noise_seed)).collect();
    let (c, _) = run_eval(fx.env(), None, Strategy::Reference, SPEC, 0.0).unwrap();
    assert_eq!(rows, c.rows.iter().map(|r| (r.prompt, r.noise_seed)).collect::<Vec<_>>());
    assert!(rows.iter().enumerate().all(|(i, r)| r.0 == i % 8));
}

#[test]
fn sweep_output_columns() {
    let rows = vec![
        SweepRow { lambda: 0.97, mean_k: 10.5, mean_q: -0.04, mean_d: 0.4 },
        SweepRow { lambda: 0.9, mean_k: 7.25, mean_q: -0.05, mean_d: 0.3 },
    ];
    let mut buf = Vec::new();
    write_sweep(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, vec!["lambda,mean_K,mean_q,mean_d", "0.97,10.5,-0.04,0.4", "0.9,7.25,-0.05,0.3"]);
}

#[test]
fn empty_ablation_is_rejected() {
    let fx = common::fixture::reference();
    let tc = TrainerConfig::default();
    let r = rapid3_core::harness::ablation(fx.env(), &tc, &BTreeSet::new(), SPEC);
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}
