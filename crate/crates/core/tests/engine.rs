mod common;

use common::{exact_gaussian_posterior, gaussian_network, relu_network};
use mlvamp::engine::{run, EngineConfig};
use mlvamp::fixed_point::{fixed_point_report, map_stationarity};
use mlvamp::model::forward_generate;
use mlvamp::Mode;
use proptest::prelude::*;

fn converging(mode: Mode, max_iters: usize, tol: f64) -> EngineConfig {
    EngineConfig { mode, max_iters, convergence_tol: tol, ..EngineConfig::default() }
}

fn rel_err(a: &nalgebra::DVector<f64>, b: &nalgebra::DVector<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[test]
fn gaussian_network_reaches_exact_posterior_mean() {
    let spec = gaussian_network([80, 60, 40], 3);
    let sig = forward_generate(&spec, 4);
    let y = sig.measurement();
    let (means, _) = exact_gaussian_posterior(&spec, y);
    for mode in [Mode::Mmse, Mode::Map] {
        let out = run(&spec, y, &converging(mode, 30, 1e-12), None).unwrap();
        for (l, m) in means.iter().enumerate() {
            let e = rel_err(&out.state.layers[l].zhat_minus, m);
            assert!(e < 1e-6, "{mode:?} layer {l}: {e:e}");
        }
    }
}

#[test]
fn converged_runs_satisfy_fixed_point_identities() {
    let gauss = gaussian_network([50, 40, 30], 8);
    let relu = relu_network(&[30, 90, 60], 30.0, 9);
    for (name, spec) in [("gaussian", &gauss), ("relu", &relu)] {
        let sig = forward_generate(spec, 1);
        let out = run(spec, sig.measurement(), &converging(Mode::Mmse, 500, 1e-10), None).unwrap();
        assert!(out.converged, "{name} did not converge");
        let rep = fixed_point_report(spec, sig.measurement(), &out.state, Mode::Mmse);
        for (l, ((c, e), b)) in rep.consistency.iter().zip(&rep.eta).zip(&rep.combination).enumerate() {
            assert!(*c <= 1e-8 && *e <= 1e-8 && *b <= 1e-8, "{name} layer {l}: {c:e} {e:e} {b:e}");
        }
    }
}

#[test]
fn map_fixed_point_is_stationary() {
    let spec = relu_network(&[100, 300, 200, 150], 10.0, 21);
    assert_eq!(spec.num_layers(), 5);
    let sig = forward_generate(&spec, 2);
    let y = sig.measurement();
    let out = run(&spec, y, &converging(Mode::Map, 2000, 1e-12), None).unwrap();
    assert!(out.converged);
    let g = map_stationarity(&spec, y, &out.state.estimates()).unwrap();
    assert!(g <= 1e-6, "relative gradient {g:e}");
    // the truth is not a stationary point
    assert!(map_stationarity(&spec, y, &sig.z[..5]).unwrap() > 1e-3);
}

#[test]
fn trace_covers_every_half_iteration() {
    let spec = relu_network(&[10, 30, 20], 20.0, 5);
    let sig = forward_generate(&spec, 5);
    let cfg = converging(Mode::Mmse, 7, 0.0);
    let a = run(&spec, sig.measurement(), &cfg, Some(&sig)).unwrap();
    let b = run(&spec, sig.measurement(), &cfg, Some(&sig)).unwrap();
    assert_eq!(a.trace.records.len(), 14);
    assert_eq!(format!("{:?}", a.trace), format!("{:?}", b.trace));
    for (h, r) in a.trace.records.iter().enumerate() {
        assert_eq!(r.half_iter, h);
        assert_eq!(r.layers.len(), 3);
        assert!(r.layers.iter().all(|s| s.nmse_db.is_some()));
    }
    let untracked = run(&spec, sig.measurement(), &cfg, None).unwrap();
    assert!(untracked.trace.records.iter().all(|r| r.layers.iter().all(|s| s.nmse_db.is_none())));
}

#[test]
fn more_iterations_do_not_hurt_a_gaussian_chain() {
    let spec = gaussian_network([40, 30, 20], 6);
    let sig = forward_generate(&spec, 6);
    let out = run(&spec, sig.measurement(), &converging(Mode::Mmse, 20, 0.0), Some(&sig)).unwrap();
    let first = out.trace.records[3].layers[0].nmse_db.unwrap();
    let last = out.trace.records.last().unwrap().layers[0].nmse_db.unwrap();
    assert!(last <= first + 1e-9, "{first} -> {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn parameters_stay_within_clipping_bounds(seed in 0u64..1000, prec in 1.0f64..100.0, map in any::<bool>()) {
        let spec = relu_network(&[12, 36, 24], prec, seed);
        let sig = forward_generate(&spec, seed + 1);
        let cfg = EngineConfig { mode: if map { Mode::Map } else { Mode::Mmse }, max_iters: 15, convergence_tol: 0.0, ..EngineConfig::default() };
        let out = run(&spec, sig.measurement(), &cfg, None).unwrap();
        for r in &out.trace.records {
            for s in &r.layers {
                prop_assert!(s.gamma_plus >= cfg.gamma_min && s.gamma_plus <= cfg.gamma_max);
                prop_assert!(s.gamma_minus >= cfg.gamma_min && s.gamma_minus <= cfg.gamma_max);
            }
        }
        for l in &out.state.layers {
            for a in [l.alpha_plus, l.alpha_minus] {
                prop_assert!(a >= cfg.alpha_clip && a <= 1.0 - cfg.alpha_clip);
            }
        }
    }
}
