mod common;

use common::{exact_gaussian_posterior, gaussian_network, linear, nonlinear, relu_network};
use mlvamp::denoisers::{scalar_mmse, Downstream, Mode};
use mlvamp::engine::{run, EngineConfig};
use mlvamp::model::{forward_generate, Activation, NetworkSpec, NoiseModel, NonlinearLayer, Precision};
use mlvamp::rng::{substream, Purpose};
use mlvamp::state_evolution::expect::{input_forward, nonlinear_forward};
use mlvamp::state_evolution::*;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn input_step_closed_form() {
    let m = input_forward(MinusLaw::Gaussian(1.0), 1.0);
    assert!((m.d - 0.5).abs() < 1e-15);
    let eta = 1.0 / m.d;
    assert!((eta - 2.0).abs() < 1e-14);
    assert!((eta - 1.0 - 1.0).abs() < 1e-14);
    // the extrinsic error of the prior estimate is exactly the prior noise
    let x = m.extrinsic(m.d);
    assert!((x.gg - 1.0).abs() < 1e-14);
    assert!((x.tg + 1.0).abs() < 1e-14);
}

#[test]
fn signal_powers() {
    let net = NetworkSpec::new(vec![
        linear(40, 40, None, 0.0, 1, 1),
        nonlinear(Activation::Relu, None),
    ])
    .unwrap();
    let mut law = PerturbationLaw::from_network(&net);
    // unit singular values make the relu input standard normal
    if let LayerLaw::Linear { s, bias, .. } = &mut law.layers[0] {
        s.iter_mut().for_each(|v| *v = 1.0);
        *bias = BiasLaw::default();
    }
    let p = se_initial_pass(&law, &ExpectationMethod::default()).unwrap();
    assert_eq!(p[0], (1.0, 1.0));
    assert!((p[1].0 - 1.0).abs() < 1e-14);
    // Monte-Carlo oracle for E max(Z, 0)^2
    let mut rng = substream(5, Purpose::Calibration, 0);
    let n = 400_000;
    let mc = (0..n).map(|_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z.max(0.0).powi(2)
    });
    let mc: f64 = mc.sum::<f64>() / n as f64;
    let se = (2.0 / n as f64).sqrt() * 1.0;
    assert!((mc - 0.5).abs() < 4.0 * se);

    let law2 = PerturbationLaw { layers: vec![law.layers[0].clone(), law.layers[1].clone(), LayerLaw::Linear { s: vec![1.0; 40], n_out: 40, n_in: 40, noise: Precision::Finite(1.0), bias: BiasLaw::default() }] };
    let p = se_initial_pass(&law2, &ExpectationMethod::default()).unwrap();
    assert!((p[2].0 - 0.5).abs() < 1e-12);
}

#[test]
fn identity_chain_keeps_power() {
    let ident = |n| LayerLaw::Linear { s: vec![1.0; n], n_out: n, n_in: n, noise: Precision::Noiseless, bias: BiasLaw::default() };
    let id = LayerLaw::Nonlinear { activation: Activation::Identity, noise: NoiseModel::None, input_bias: BiasLaw::default() };
    let law = PerturbationLaw { layers: vec![ident(5), id.clone(), ident(5), id, ident(5)] };
    for (t, p) in se_initial_pass(&law, &ExpectationMethod::default()).unwrap() {
        assert!((t - 1.0).abs() < 1e-14 && (p - 1.0).abs() < 1e-14);
    }
}

#[test]
fn zero_iterations_give_prior_error() {
    let net = relu_network(&[30, 60, 40], 10.0, 2);
    let law = PerturbationLaw::from_network(&net);
    let run = run_se(&law, &SeConfig { max_iters: 0, ..Default::default() }).unwrap();
    assert!(run.records.is_empty());
    for p in &run.initial {
        assert_eq!(p.nmse_db, 0.0);
    }
}

#[test]
fn gaussian_network_tracks_engine_parameters_exactly() {
    let net = gaussian_network([120, 90, 60], 4);
    let cfg = EngineConfig { max_iters: 12, convergence_tol: 0.0, ..Default::default() };
    let s = forward_generate(&net, 8);
    let eng = run(&net, s.measurement(), &cfg, Some(&s)).unwrap();
    let se = run_se(&PerturbationLaw::from_network(&net), &SeConfig::from_engine(&cfg)).unwrap();
    assert_eq!(eng.trace.records.len(), se.records.len());
    for (a, b) in eng.trace.records.iter().zip(&se.records) {
        for (x, y) in a.layers.iter().zip(&b.layers) {
            for (u, v) in [(x.gamma_plus, y.gamma_plus), (x.gamma_minus, y.gamma_minus), (x.alpha_plus, y.alpha_plus), (x.alpha_minus, y.alpha_minus)] {
                assert!((u.is_nan() && v.is_nan()) || rel(u, v) < 1e-10, "half {} {u} vs {v}", a.half_iter);
            }
        }
    }
}

#[test]
fn single_linear_layer_variance_is_exact() {
    let net = NetworkSpec::new(vec![linear(60, 80, Some(2.0), 0.3, 6, 1)]).unwrap();
    let s = forward_generate(&net, 1);
    let cfg = EngineConfig { max_iters: 30, convergence_tol: 1e-12, ..Default::default() };
    let eng = run(&net, s.measurement(), &cfg, None).unwrap();
    let (mean, var) = exact_gaussian_posterior(&net, s.measurement());
    let st = &eng.state.layers[0];
    assert!((&st.zhat_minus - &mean[0]).norm() / mean[0].norm() < 1e-10);
    assert!(rel(1.0 / (st.gamma_plus + st.gamma_minus), var[0]) < 1e-10);
    let se = run_se(&PerturbationLaw::from_network(&net), &SeConfig::from_engine(&cfg)).unwrap();
    let last = se.records.last().unwrap();
    assert!(rel(last.layers[0].mse, var[0]) < 1e-10);
}

#[test]
fn scalar_chain_matches_wiener_errors() {
    let one = |nu| LayerLaw::Linear { s: vec![1.0], n_out: 1, n_in: 1, noise: Precision::Finite(nu), bias: BiasLaw::default() };
    let id = LayerLaw::Nonlinear { activation: Activation::Identity, noise: NoiseModel::Gaussian { precision: 1.0 }, input_bias: BiasLaw::default() };
    let law = PerturbationLaw { layers: vec![one(1.0), id, one(1.0)] };
    let fp = matched_mmse_recursion(&law, &MatchedConfig::default()).unwrap();
    assert!(fp.converged);
    // y = z_l + noise of variance 3 - l; z_l has variance l + 1
    for (l, want) in [0.75, 1.0, 0.75].iter().enumerate() {
        assert!(rel(fp.mse[l], *want) < 1e-8, "layer {l}: {} vs {want}", fp.mse[l]);
    }
}

#[test]
fn matched_recursion_agrees_with_full_recursion() {
    let net = relu_network(&[40, 120, 80], 10.0, 9);
    let law = PerturbationLaw::from_network(&net);
    let fp = matched_mmse_recursion(&law, &MatchedConfig { tol: 1e-11, ..Default::default() }).unwrap();
    assert!(fp.converged && fp.residual <= 1e-8);
    let se = run_se(&law, &SeConfig { max_iters: 300, tol: 1e-13, ..Default::default() }).unwrap();
    for (l, s) in se.state.iter().enumerate() {
        assert!(rel(s.gamma_plus, fp.gamma_plus[l]) < 1e-4, "layer {l} plus");
        assert!(rel(s.gamma_minus, fp.gamma_minus[l]) < 1e-4, "layer {l} minus");
        assert!(rel(s.mse_minus, fp.mse[l]) < 1e-4);
    }
}

#[test]
fn relu_forward_step_against_monte_carlo() {
    let layer = NonlinearLayer::new(Activation::Relu, NoiseModel::None).unwrap();
    let input = InputLaw { k: [1.0, 0.0, 0.3], load: 0.0 };
    let (gp, gm) = (1.0 / 0.3, 1.0 / 0.5);
    let m = nonlinear_forward(Mode::Mmse, &layer, BiasLaw::default(), &input, MinusLaw::Gaussian(0.5), gm, gp, &ExpectationMethod::default());
    let x = m.extrinsic(m.d);

    let mut rng = substream(11, Purpose::Calibration, 1);
    let n = 2_000_000usize;
    let (mut sd, mut sd2, mut st, mut snn) = (0.0, 0.0, 0.0, 0.0);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        let c: f64 = StandardNormal.sample(&mut rng);
        let (b, c) = (b * 0.3f64.sqrt(), c * 0.5f64.sqrt());
        let phi = z.max(0.0);
        let e = scalar_mmse(Activation::Relu, NoiseModel::None, Downstream::Belief { r: phi + c, gamma: gm }, z + b, gp).unwrap();
        sd += e.dz;
        sd2 += e.dz * e.dz;
        samples.push((phi, c, e.z));
    }
    let d = sd / n as f64;
    let d_se = ((sd2 / n as f64 - d * d) / n as f64).sqrt();
    assert!((m.d - d).abs() < 3.0 * d_se, "alpha {} vs {d} +- {d_se}", m.d);
    for (phi, c, h) in &samples {
        let q = (h - phi - m.d * c) / (1.0 - m.d);
        st += phi * q;
        snn += q * q;
    }
    let (tg, gg) = (st / n as f64, snn / n as f64);
    assert!((x.tg - tg).abs() < 5e-3 * gg.max(1.0), "E T N {} vs {tg}", x.tg);
    assert!(rel(x.gg, gg) < 5e-3, "E N^2 {} vs {gg}", x.gg);
}

#[test]
fn exact_observation_leaves_no_backward_error() {
    let net = NetworkSpec::new(vec![linear(30, 30, Some(1.0), 0.0, 3, 1), nonlinear(Activation::Identity, None)]).unwrap();
    let law = PerturbationLaw::from_network(&net);
    let se = run_se(&law, &SeConfig { max_iters: 3, ..Default::default() }).unwrap();
    assert!(se.state[1].mse_minus == 0.0);
    assert!(se.state[1].tau_minus < 1e-10);
}

#[test]
fn recursion_is_deterministic() {
    let net = relu_network(&[30, 60, 40], 10.0, 2);
    let law = PerturbationLaw::from_network(&net);
    for method in [ExpectationMethod::default(), ExpectationMethod::MonteCarlo { samples: 2000, seed: 3 }] {
        let cfg = SeConfig { max_iters: 4, method, ..Default::default() };
        let a = run_se(&law, &cfg).unwrap();
        let b = run_se(&law, &cfg).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
}

#[test]
fn backward_steps_mirror_forward_on_symmetric_chain() {
    // square orthogonal layers with equal noise: the chain reads the same
    // in both directions once the prior and measurement precisions agree
    let q = |nu| LayerLaw::Linear { s: vec![1.0; 8], n_out: 8, n_in: 8, noise: Precision::Finite(nu), bias: BiasLaw::default() };
    let law = PerturbationLaw { layers: vec![q(1.0)] };
    let fp = matched_mmse_recursion(&law, &MatchedConfig::default()).unwrap();
    assert!(rel(fp.gamma_plus[0], fp.gamma_minus[0]) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn states_stay_psd(seed in 0u64..1000, nu in 1.0f64..100.0) {
        let net = relu_network(&[20, 40, 30], nu, seed);
        let law = PerturbationLaw::from_network(&net);
        let se = run_se(&law, &SeConfig { max_iters: 6, method: ExpectationMethod::Quadrature { hermite: 10, legendre: 20 }, ..Default::default() }).unwrap();
        for s in &se.state {
            let [a, b, c] = s.k_plus;
            let tr = a + c;
            let det = a * c - b * b;
            let lmin = tr / 2.0 - ((tr / 2.0).powi(2) - det).max(0.0).sqrt();
            prop_assert!(lmin >= -1e-12 * tr.max(1.0));
            prop_assert!(s.tau_minus >= 0.0);
            prop_assert!(s.alpha_plus > 0.0 && s.alpha_plus < 1.0);
            prop_assert!(s.alpha_minus > 0.0 && s.alpha_minus < 1.0);
            prop_assert!((s.eta_minus - s.gamma_plus / s.alpha_minus).abs() <= 1e-12 * s.eta_minus);
            prop_assert!((s.gamma_minus - (s.eta_minus - s.gamma_plus)).abs() <= 1e-10 * s.eta_minus);
        }
    }
}
