use mlvamp::engine::{run, EngineConfig};
use mlvamp::harness::*;
use mlvamp::model::{forward_generate, Layer};
use mlvamp::state_evolution::ExpectationMethod;
use proptest::prelude::*;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.id = "small".into();
    cfg.recipe = Recipe { dims: vec![8, 24, 24], measurements: 16, calibration_draws: 10, ..Recipe::default() };
    cfg.engine.max_iters = 5;
    cfg.se_method = ExpectationMethod::Quadrature { hermite: 12, legendre: 16 };
    cfg.trials = 4;
    cfg
}

fn row(id: &str, seed: u64, half: usize, layer: usize, emp: f64, se: f64) -> ResultRow {
    ResultRow {
        experiment_id: id.into(),
        trial_seed: seed,
        half_iter: half,
        layer,
        nmse_db_empirical: Some(emp),
        nmse_db_se: Some(se),
        gamma_plus: 1.0 + emp.abs(),
        gamma_minus: 2.0,
        alpha_plus: 0.3,
        alpha_minus: 0.6,
        residual_consistency: 0.1,
        wall_ms: 0.0,
    }
}

fn csv_bytes(rows: &[ResultRow]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_rows(rows, &mut buf).unwrap();
    buf
}

#[test]
fn default_recipe_dimensions() {
    let spec = Recipe::default().build(1).unwrap();
    assert_eq!(spec.dims(), &[20, 100, 100, 500, 500, 784, 784, 100]);
}

#[test]
fn measurement_condition_number() {
    let r = Recipe { dims: vec![6, 30, 30], measurements: 12, kappa: 10.0, calibration_draws: 5, ..Recipe::default() };
    let spec = r.build(2).unwrap();
    let Layer::Linear(meas) = spec.layer(3) else { panic!("measurement layer must be linear") };
    let s = &meas.factors.s;
    assert!((s[0] / s[11] - 10.0).abs() < 1e-9);
    // equal ratios between neighbours
    for w in s.as_slice().windows(2) {
        assert!((w[0] / w[1] - 10f64.powf(1.0 / 11.0)).abs() < 1e-9);
    }
}

#[test]
fn bias_places_the_positive_fraction() {
    for rho in [0.2, 0.4, 0.7] {
        let r = Recipe { dims: vec![20, 200, 200], rho, calibration_draws: 100, ..Recipe::default() };
        let spec = r.build(4).unwrap();
        let mut pos = 0usize;
        let mut n = 0usize;
        for t in 0..50 {
            let z = forward_generate(&spec, 1000 + t);
            pos += z.z[1].iter().filter(|v| **v > 0.0).count();
            n += z.z[1].len();
        }
        let frac = pos as f64 / n as f64;
        assert!((frac - rho).abs() < 0.03, "rho {rho}: {frac}");
    }
}

#[test]
fn symmetric_pre_activations_need_no_shift() {
    let r = Recipe { dims: vec![20, 400, 400], rho: 0.5, bias_sd: 0.0, calibration_draws: 400, ..Recipe::default() };
    let prior = r.build_prior(5).unwrap();
    let Layer::Linear(lin) = &prior[0] else { panic!() };
    let b = lin.bias[0];
    assert!(lin.bias.iter().all(|v| *v == b), "the shift is a common scalar");
    assert!(b.abs() < 0.03, "median shift {b}");
}

#[test]
fn recipe_validation() {
    for dims in [vec![20, 100], vec![20, 100, 90], vec![0, 5, 5]] {
        let r = Recipe { dims, ..Recipe::default() };
        assert!(r.validate().is_err());
    }
    assert!(Recipe { rho: 1.0, ..Recipe::default() }.validate().is_err());
    assert!(Recipe { kappa: 0.5, ..Recipe::default() }.validate().is_err());
    let mut cfg = small();
    cfg.trials = 0;
    assert!(matches!(run_trials(&cfg), Err(mlvamp::Error::Config(_))));
}

#[test]
fn single_trial_aggregate_is_the_trace() {
    let mut cfg = small();
    cfg.trials = 1;
    let set = run_trials(&cfg).unwrap();
    let summary = aggregate(&set.rows);
    assert_eq!(summary.len(), set.rows.len());
    for (s, r) in summary.iter().zip(&set.rows) {
        assert_eq!((s.half_iter, s.layer, s.trials), (r.half_iter, r.layer, 1));
        assert_eq!(s.mean_nmse_db_empirical, r.nmse_db_empirical);
        assert_eq!(s.median_nmse_db_empirical, r.nmse_db_empirical);
        assert_eq!(s.mean_nmse_db_se, r.nmse_db_se);
        assert_eq!(s.mean_gamma_plus, r.gamma_plus);
        // the first forward sweep has no backward sensitivity yet
        assert!(s.mean_alpha_minus == r.alpha_minus || (r.half_iter == 0 && s.mean_alpha_minus.is_nan()));
    }
}

#[test]
fn trials_are_reproducible_and_complete() {
    let cfg = small();
    let a = run_trials(&cfg).unwrap();
    let b = run_trials(&cfg).unwrap();
    assert!(a.failures.is_empty());
    assert_eq!(csv_bytes(&a.rows), csv_bytes(&b.rows));
    // trials x half-iterations x estimated signals
    assert_eq!(a.rows.len(), 4 * 10 * 3);
    let seeds: std::collections::BTreeSet<u64> = a.rows.iter().map(|r| r.trial_seed).collect();
    assert_eq!(seeds.len(), 4);
    assert!(a.rows.iter().all(|r| r.wall_ms == 0.0));
}

#[test]
fn early_convergence_is_padded() {
    let cfg = small();
    let spec = cfg.recipe.build(3).unwrap();
    let sig = forward_generate(&spec, 3);
    let engine = EngineConfig { max_iters: 200, convergence_tol: 1e-4, ..EngineConfig::default() };
    let out = run(&spec, sig.measurement(), &engine, Some(&sig)).unwrap();
    assert!(out.converged);
    let n = out.trace.records.len();
    let rows = trace_rows("p", 3, &out, None, n + 7, 0.0);
    assert_eq!(rows.len(), (n + 7) * 3);
    for r in rows.iter().filter(|r| r.half_iter >= n) {
        let src = if (r.half_iter - n) % 2 == 0 { n - 2 } else { n - 1 };
        let orig = &rows[src * 3 + r.layer];
        assert_eq!(format!("{:?}", (r.nmse_db_empirical, r.gamma_plus, r.alpha_minus)), format!("{:?}", (orig.nmse_db_empirical, orig.gamma_plus, orig.alpha_minus)));
    }
}

#[test]
fn csv_round_trip_reproduces_summary() {
    let set = run_trials(&small()).unwrap();
    let bytes = csv_bytes(&set.rows);
    let back = read_rows(&bytes[..]).unwrap();
    // NaN entries compare unequal, so compare the exact text forms
    let dbg = |v: &[SummaryRow]| format!("{v:?}");
    assert_eq!(dbg(&aggregate(&back)), dbg(&aggregate(&set.rows)));
    let summary = aggregate(&set.rows);
    let mut sbuf = Vec::new();
    write_summary(&summary, &mut sbuf).unwrap();
    assert_eq!(dbg(&read_summary(&sbuf[..]).unwrap()), dbg(&summary));
    assert!(String::from_utf8(bytes).unwrap().starts_with(SCHEMA_LINE));
}

#[test]
fn unversioned_files_are_rejected() {
    let bytes = csv_bytes(&[row("a", 1, 0, 0, -1.0, -1.0)]);
    let text = String::from_utf8(bytes).unwrap();
    let stripped = text.lines().skip(1).collect::<Vec<_>>().join("\n");
    assert!(read_rows(stripped.as_bytes()).is_err());
}

#[test]
fn compare_rejects_mismatched_grids() {
    let emp = vec![row("a", 1, 0, 0, -3.0, -2.0), row("a", 1, 1, 0, -4.0, -4.5)];
    let pred = vec![row("a", 9, 0, 0, 0.0, -2.5)];
    assert!(matches!(compare(&emp, &pred, 0, Aggregation::Mean), Err(mlvamp::Error::Config(_))));
    let mut missing = emp.clone();
    missing[1].nmse_db_se = None;
    assert!(compare(&emp, &missing, 0, Aggregation::Mean).is_err());
    assert!(compare(&emp, &emp, 3, Aggregation::Mean).is_err());
    let rep = compare(&emp, &emp, 0, Aggregation::Median).unwrap();
    assert_eq!(rep.cells, 2);
    assert!((rep.max_abs_gap_db - 1.0).abs() < 1e-12);
    assert_eq!(rep.worst.unwrap().half_iter, 0);
}

#[test]
fn mean_and_median_examples() {
    assert_eq!(mean(&[1.0, 2.0, 6.0]), 3.0);
    assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    assert_eq!(quantile_sorted(&[0.0, 1.0, 2.0, 3.0, 4.0], 0.25), 1.0);
}

#[test]
fn sweep_shares_prior_and_signal() {
    let cfg = small();
    let set = run_sweep(&cfg, &[4, 16]).unwrap();
    let ids: std::collections::BTreeSet<_> = set.rows.iter().map(|r| r.experiment_id.clone()).collect();
    assert_eq!(ids.len(), 2);
    // the prior is identical across counts
    let r = &cfg.recipe;
    let prior = r.build_prior(7).unwrap();
    let a = Recipe { measurements: 4, ..r.clone() }.attach_measurement(&prior, 7).unwrap();
    let b = Recipe { measurements: 16, ..r.clone() }.attach_measurement(&prior, 7).unwrap();
    let (za, zb) = (forward_generate(&a, 3), forward_generate(&b, 3));
    assert_eq!(za.z[..3], zb.z[..3]);
    let points = sweep_summary(&cfg.id, &set.rows, &[4, 16]);
    assert_eq!(points.len(), 2);
    assert_eq!(points[0].half_iter, 9);
    assert!(points.iter().all(|p| p.trials == cfg.trials));
    // the slice at the configured count reproduces a plain run
    let plain = run_trials(&cfg).unwrap();
    let slice: Vec<_> = set.rows.iter().filter(|r| r.experiment_id == sweep_id(&cfg.id, 16)).map(|r| ResultRow { experiment_id: cfg.id.clone(), ..r.clone() }).collect();
    assert_eq!(format!("{slice:?}"), format!("{:?}", plain.rows));
}

#[test]
fn monotonicity_flags_inversions_beyond_slack() {
    let pt = |m, v| SweepPoint {
        measurements: m,
        half_iter: 9,
        trials: 1,
        mean_nmse_db_empirical: Some(v),
        median_nmse_db_empirical: Some(v),
        mean_nmse_db_se: None,
        median_nmse_db_se: None,
    };
    let pts = vec![pt(10, -2.0), pt(50, -1.8), pt(100, -5.0), pt(200, -4.0)];
    assert_eq!(monotonicity_violations(&pts, 0.5), vec![200]);
}

#[test]
fn config_json_round_trip_and_unknown_fields() {
    let cfg = small();
    let text = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"trails": 3}"#).is_err());
    let partial: ExperimentConfig = serde_json::from_str(r#"{"trials": 3}"#).unwrap();
    assert_eq!(partial.recipe, Recipe::default());
    assert_eq!(partial.engine.convergence_tol, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_ignores_row_order(vals in prop::collection::vec(-40.0f64..10.0, 24), perm in Just(()).prop_perturb(|_, mut rng| {
        let mut idx: Vec<usize> = (0..24).collect();
        for i in (1..idx.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            idx.swap(i, j);
        }
        idx
    })) {
        // 4 trials x 3 half-iterations x 2 signals
        let rows: Vec<ResultRow> = vals.iter().enumerate().map(|(i, v)| row("p", (i / 6) as u64, (i / 2) % 3, i % 2, *v, v / 2.0)).collect();
        let shuffled: Vec<ResultRow> = perm.iter().map(|&i| rows[i].clone()).collect();
        let a = aggregate(&rows);
        let b = aggregate(&shuffled);
        prop_assert_eq!(&a, &b);
        let (mut sa, mut sb) = (Vec::new(), Vec::new());
        write_summary(&a, &mut sa).unwrap();
        write_summary(&b, &mut sb).unwrap();
        prop_assert_eq!(sa, sb);
    }

    #[test]
    fn median_lies_between_extremes(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let m = median(&v);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo && m <= hi);
        let mu = mean(&v);
        prop_assert!(mu >= lo - 1e-9 && mu <= hi + 1e-9);
    }
}
