//! State evolution: the deterministic scalar recursion that predicts the
//! per-iteration behavior of ML-VAMP in the large-system limit.

pub mod expect;
mod law;

pub use expect::{ExpectationMethod, Extrinsic, InputLaw, MinusLaw, StepMoments};
pub use law::{BiasLaw, LayerLaw, PerturbationLaw};

use crate::denoisers::Mode;
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::model::NonlinearLayer;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeConfig {
    pub mode: Mode,
    pub max_iters: usize,
    pub gamma_init: f64,
    pub damping: f64,
    pub alpha_clip: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Stop early once every precision changes by less than this, relatively.
    pub tol: f64,
    pub method: ExpectationMethod,
}

impl Default for SeConfig {
    fn default() -> Self {
        Self::from_engine(&EngineConfig::default())
    }
}

impl SeConfig {
    /// The recursion that tracks an engine run with this configuration.
    pub fn from_engine(cfg: &EngineConfig) -> Self {
        Self {
            mode: cfg.mode,
            max_iters: cfg.max_iters,
            gamma_init: cfg.gamma_init,
            damping: cfg.damping,
            alpha_clip: cfg.alpha_clip,
            gamma_min: cfg.gamma_min,
            gamma_max: cfg.gamma_max,
            tol: 0.0,
            method: ExpectationMethod::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let engine = EngineConfig {
            mode: self.mode,
            max_iters: self.max_iters,
            gamma_init: self.gamma_init,
            damping: self.damping,
            alpha_clip: self.alpha_clip,
            gamma_min: self.gamma_min,
            gamma_max: self.gamma_max,
            ..EngineConfig::default()
        };
        engine.validate()?;
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tol must be nonnegative".into()));
        }
        match self.method {
            ExpectationMethod::Quadrature { hermite, legendre } if hermite == 0 || legendre == 0 => Err(Error::Config("quadrature orders must be positive".into())),
            ExpectationMethod::MonteCarlo { samples: 0, .. } => Err(Error::Config("need at least one Monte-Carlo sample".into())),
            _ => Ok(()),
        }
    }
}

/// Scalar state attached to signal `z_l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeLayerState {
    /// Raw second moments `(E Q0^2, E Q0 G+, E G+^2)` of the bias-free
    /// signal and the bias-free part of the forward message error.
    pub k_plus: [f64; 3],
    /// Loading of the forward message error on the layer bias.
    pub load_plus: f64,
    /// Variance of the bias-free part of the backward message error.
    pub tau_minus: f64,
    /// Loading of the backward message error on the layer bias.
    pub load_minus: f64,
    /// Second moment of the signal without the bias of its layer.
    pub tau_zero: f64,
    /// Second moment of the signal itself.
    pub signal_power: f64,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub eta_plus: f64,
    pub eta_minus: f64,
    pub mse_plus: f64,
    pub mse_minus: f64,
}

impl SeLayerState {
    pub fn input_law(&self) -> InputLaw {
        InputLaw { k: self.k_plus, load: self.load_plus }
    }

    pub fn nmse_db_plus(&self) -> f64 {
        10.0 * (self.mse_plus / self.signal_power).log10()
    }

    pub fn nmse_db_minus(&self) -> f64 {
        10.0 * (self.mse_minus / self.signal_power).log10()
    }
}

/// Predictions for all signals after half-iteration `half_iter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeRecord {
    pub half_iter: usize,
    pub layers: Vec<SeLayerPrediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeLayerPrediction {
    pub nmse_db: f64,
    pub mse: f64,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeRun {
    /// Prior-only prediction: every estimate equal to the signal mean of zero.
    pub initial: Vec<SeLayerPrediction>,
    pub records: Vec<SeRecord>,
    pub state: Vec<SeLayerState>,
    pub iterations: usize,
}

impl SeRun {
    /// Record for a half-iteration; past the end of an early-stopped run the
    /// last record stands in, since the recursion has reached its fixed point.
    pub fn at(&self, half_iter: usize) -> Option<&SeRecord> {
        if let Some(r) = self.records.iter().find(|r| r.half_iter == half_iter) {
            return Some(r);
        }
        self.records.iter().rev().take(2).find(|r| r.half_iter < half_iter && r.half_iter % 2 == half_iter % 2)
    }
}

fn nonlinear(law: &LayerLaw) -> Option<(NonlinearLayer, BiasLaw)> {
    match *law {
        LayerLaw::Nonlinear { activation, noise, input_bias } => Some((NonlinearLayer { activation, noise }, input_bias)),
        LayerLaw::Linear { .. } => None,
    }
}

/// Second moments of each signal, `(without bias, with bias)`.
pub fn se_initial_pass(law: &PerturbationLaw, method: &ExpectationMethod) -> Result<Vec<(f64, f64)>> {
    law.validate()?;
    let mut out = vec![(1.0, 1.0)];
    for l in &law.layers[..law.num_layers() - 1] {
        let prev = out.last().expect("nonempty").1;
        let next = match l {
            LayerLaw::Linear { s, n_out, noise, bias, .. } => {
                let t = s.iter().map(|v| v * v * prev).sum::<f64>() / *n_out as f64 + noise.variance();
                (t, t + bias.second_moment())
            }
            LayerLaw::Nonlinear { .. } => {
                let (layer, bias) = nonlinear(l).expect("nonlinear");
                // the bias already sits in `prev`; pass only the bias-free part
                let base = out.last().expect("nonempty").0;
                let t = expect::nonlinear_second_moment(&layer, base, bias, method);
                (t, t)
            }
        };
        if !next.0.is_finite() || !next.1.is_finite() {
            return Err(Error::NumericFailure("non-finite signal power".into()));
        }
        out.push(next);
    }
    Ok(out)
}

struct Stepper<'a> {
    law: &'a PerturbationLaw,
    cfg: &'a SeConfig,
    iteration: usize,
}

impl Stepper<'_> {
    fn forward(&self, l: usize, state: &[SeLayerState], minus: MinusLaw) -> Result<StepMoments> {
        let gm = state[l].gamma_minus;
        let m = if l == 0 {
            expect::input_forward(minus, gm)
        } else {
            let k = state[l - 1].input_law();
            let gp = state[l - 1].gamma_plus;
            match &self.law.layers[l - 1] {
                LayerLaw::Linear { s, n_out, n_in, noise, bias } => expect::linear_forward(s, *n_out, *n_in, *noise, bias.second_moment(), &k, minus, state[l].load_minus, gm, gp),
                ll => {
                    let (layer, bias) = nonlinear(ll).expect("nonlinear");
                    expect::nonlinear_forward(self.cfg.mode, &layer, bias, &k, minus, gm, gp, &self.cfg.method)
                }
            }
        };
        self.check(l, m)
    }

    fn backward(&self, l: usize, state: &[SeLayerState]) -> Result<StepMoments> {
        let big_l = self.law.num_layers();
        let k = state[l].input_law();
        let gp = state[l].gamma_plus;
        let law = &self.law.layers[l];
        let m = if l == big_l - 1 {
            match law {
                LayerLaw::Linear { s, n_out, n_in, noise, .. } => expect::linear_output(s, *n_out, *n_in, *noise, &k, gp),
                ll => {
                    let (layer, bias) = nonlinear(ll).expect("nonlinear");
                    expect::nonlinear_output(self.cfg.mode, &layer, bias, &k, gp, &self.cfg.method)
                }
            }
        } else {
            let down = &state[l + 1];
            match law {
                LayerLaw::Linear { s, n_out, n_in, noise, bias } => {
                    expect::linear_backward(s, *n_out, *n_in, *noise, bias.second_moment(), &k, down.tau_minus, down.load_minus, down.gamma_minus, gp)
                }
                ll => {
                    let (layer, bias) = nonlinear(ll).expect("nonlinear");
                    expect::nonlinear_backward(self.cfg.mode, &layer, bias, &k, down.tau_minus, down.gamma_minus, gp, &self.cfg.method)
                }
            }
        };
        self.check(l, m)
    }

    fn check(&self, l: usize, m: StepMoments) -> Result<StepMoments> {
        let v = [m.d, m.ee, m.ec, m.cc, m.te, m.tc, m.tt, m.eb, m.cb];
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged { layer: l, iteration: self.iteration, detail: "non-finite state-evolution expectation".into() });
        }
        Ok(m)
    }

    /// Returns `(alpha, eta, gamma)` mirroring the engine's clipping and damping.
    fn params(&self, l: usize, d: f64, gamma_in: f64, gamma_old: f64) -> Result<(f64, f64, f64)> {
        let c = self.cfg;
        if !d.is_finite() {
            return Err(Error::Diverged { layer: l, iteration: self.iteration, detail: format!("alpha is {d}") });
        }
        let a = d.clamp(c.alpha_clip, 1.0 - c.alpha_clip);
        let eta = gamma_in / a;
        let raw = eta - gamma_in;
        if !raw.is_finite() {
            return Err(Error::Diverged { layer: l, iteration: self.iteration, detail: format!("gamma is {raw}") });
        }
        let mut g = raw.clamp(c.gamma_min, c.gamma_max);
        if c.damping < 1.0 && gamma_old.is_finite() {
            g = gamma_old.powf(1.0 - c.damping) * g.powf(c.damping);
        }
        Ok((a, eta, g))
    }
}

fn predictions(state: &[SeLayerState], forward: bool) -> Vec<SeLayerPrediction> {
    state
        .iter()
        .map(|s| {
            let mse = if forward { s.mse_plus } else { s.mse_minus };
            SeLayerPrediction { nmse_db: 10.0 * (mse / s.signal_power).log10(), mse, gamma_plus: s.gamma_plus, gamma_minus: s.gamma_minus, alpha_plus: s.alpha_plus, alpha_minus: s.alpha_minus }
        })
        .collect()
}

fn rel_change(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Run the recursion from the engine's initial condition, where every
/// backward message is zero with precision `gamma_init`.
pub fn run_se(law: &PerturbationLaw, cfg: &SeConfig) -> Result<SeRun> {
    cfg.validate()?;
    let powers = se_initial_pass(law, &cfg.method)?;
    let big_l = law.num_layers();
    let mut state: Vec<SeLayerState> = powers
        .iter()
        .map(|&(t0, p)| SeLayerState {
            k_plus: [t0, f64::NAN, f64::NAN],
            load_plus: 0.0,
            tau_minus: f64::NAN,
            load_minus: 0.0,
            tau_zero: t0,
            signal_power: p,
            alpha_plus: f64::NAN,
            alpha_minus: f64::NAN,
            gamma_plus: f64::NAN,
            gamma_minus: cfg.gamma_init,
            eta_plus: f64::NAN,
            eta_minus: f64::NAN,
            mse_plus: p,
            mse_minus: p,
        })
        .collect();
    let initial = predictions(&state, false);
    let mut records = Vec::with_capacity(2 * cfg.max_iters);
    let mut iterations = 0;
    for k in 0..cfg.max_iters {
        let prev: Vec<(f64, f64)> = state.iter().map(|s| (s.gamma_plus, s.gamma_minus)).collect();
        let st = Stepper { law, cfg, iteration: k };
        for l in 0..big_l {
            let minus = if k == 0 { MinusLaw::Zero } else { MinusLaw::Gaussian(state[l].tau_minus) };
            let m = st.forward(l, &state, minus)?;
            let (a, eta, g) = st.params(l, m.d, state[l].gamma_minus, state[l].gamma_plus)?;
            let x = m.extrinsic(a);
            let s = &mut state[l];
            s.k_plus = [x.tt, x.tg, x.gg];
            s.load_plus = x.load;
            s.alpha_plus = a;
            s.eta_plus = eta;
            s.gamma_plus = g;
            s.mse_plus = m.ee;
        }
        records.push(SeRecord { half_iter: 2 * k, layers: predictions(&state, true) });
        for l in (0..big_l).rev() {
            let m = st.backward(l, &state)?;
            let (a, eta, g) = st.params(l, m.d, state[l].gamma_plus, state[l].gamma_minus)?;
            let s = &mut state[l];
            let x = m.extrinsic(a);
            s.tau_minus = x.gg;
            s.load_minus = x.load;
            s.alpha_minus = a;
            s.eta_minus = eta;
            s.gamma_minus = g;
            s.mse_minus = m.ee;
        }
        records.push(SeRecord { half_iter: 2 * k + 1, layers: predictions(&state, false) });
        iterations = k + 1;
        if k > 0 && cfg.tol > 0.0 {
            let change = state.iter().zip(&prev).map(|(s, p)| rel_change(s.gamma_plus, p.0).max(rel_change(s.gamma_minus, p.1))).fold(0.0, f64::max);
            if change < cfg.tol {
                break;
            }
        }
    }
    Ok(SeRun { initial, records, state, iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedFixedPoint {
    pub gamma_plus: Vec<f64>,
    pub gamma_minus: Vec<f64>,
    pub eta: Vec<f64>,
    /// Predicted mean squared error `1 / eta` of each signal.
    pub mse: Vec<f64>,
    /// Largest relative violation of the two fixed-point equalities.
    pub residual: f64,
    pub sweeps: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchedConfig {
    pub damping: f64,
    pub max_sweeps: usize,
    pub tol: f64,
    pub gamma_init: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub method: ExpectationMethod,
}

impl Default for MatchedConfig {
    fn default() -> Self {
        Self { damping: 0.5, max_sweeps: 500, tol: 1e-8, gamma_init: 1e-3, gamma_min: 1e-11, gamma_max: 1e11, method: ExpectationMethod::default() }
    }
}

/// The truth given the forward message is the message plus independent
/// noise of variance `1 / gamma_plus`, and carries no component along the
/// bias.
fn matched_input(power: f64, gamma_plus: f64) -> InputLaw {
    InputLaw { k: [power, -1.0 / gamma_plus, 1.0 / gamma_plus], load: 0.0 }
}

/// Mean squared error of the forward MMSE estimate of signal `l` when each
/// message is an independent Gaussian observation of the signal with the
/// given precisions.
fn matched_plus(law: &PerturbationLaw, powers: &[(f64, f64)], l: usize, gp: &[f64], gm: &[f64], method: &ExpectationMethod) -> f64 {
    let minus = MinusLaw::Gaussian(1.0 / gm[l]);
    if l == 0 {
        return expect::input_forward(minus, gm[l]).ee;
    }
    let k = matched_input(powers[l - 1].0, gp[l - 1]);
    match &law.layers[l - 1] {
        LayerLaw::Linear { s, n_out, n_in, noise, bias } => expect::linear_forward(s, *n_out, *n_in, *noise, bias.second_moment(), &k, minus, 0.0, gm[l], gp[l - 1]).ee,
        ll => {
            let (layer, bias) = nonlinear(ll).expect("nonlinear");
            expect::nonlinear_forward(Mode::Mmse, &layer, bias, &k, minus, gm[l], gp[l - 1], method).ee
        }
    }
}

/// Mean squared error of the backward MMSE estimate of signal `l`.
fn matched_minus(law: &PerturbationLaw, powers: &[(f64, f64)], l: usize, gp: &[f64], gm: &[f64], method: &ExpectationMethod) -> f64 {
    let k = matched_input(powers[l].0, gp[l]);
    if l == law.num_layers() - 1 {
        return match &law.layers[l] {
            LayerLaw::Linear { s, n_out, n_in, noise, .. } => expect::linear_output(s, *n_out, *n_in, *noise, &k, gp[l]).ee,
            ll => {
                let (layer, bias) = nonlinear(ll).expect("nonlinear");
                expect::nonlinear_output(Mode::Mmse, &layer, bias, &k, gp[l], method).ee
            }
        };
    }
    match &law.layers[l] {
        LayerLaw::Linear { s, n_out, n_in, noise, bias } => expect::linear_backward(s, *n_out, *n_in, *noise, bias.second_moment(), &k, 1.0 / gm[l + 1], 0.0, gm[l + 1], gp[l]).ee,
        ll => {
            let (layer, bias) = nonlinear(ll).expect("nonlinear");
            expect::nonlinear_backward(Mode::Mmse, &layer, bias, &k, 1.0 / gm[l + 1], gm[l + 1], gp[l], method).ee
        }
    }
}

/// Fixed point of the MSE recursion that governs matched MMSE estimation:
/// `gamma_plus = 1 / E_plus - gamma_minus` and
/// `gamma_minus = 1 / E_minus - gamma_plus` at every signal.
pub fn matched_mmse_recursion(law: &PerturbationLaw, cfg: &MatchedConfig) -> Result<MatchedFixedPoint> {
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(Error::Config("damping must lie in (0, 1]".into()));
    }
    let powers = se_initial_pass(law, &cfg.method)?;
    let big_l = law.num_layers();
    let clamp = |g: f64| g.clamp(cfg.gamma_min, cfg.gamma_max);
    let mut gm = vec![cfg.gamma_init; big_l];
    let mut gp = vec![cfg.gamma_init; big_l];
    let residual = |gp: &[f64], gm: &[f64]| {
        (0..big_l)
            .map(|l| {
                let rp = rel_change(gp[l], clamp(1.0 / matched_plus(law, &powers, l, gp, gm, &cfg.method) - gm[l]));
                let rm = rel_change(gm[l], clamp(1.0 / matched_minus(law, &powers, l, gp, gm, &cfg.method) - gp[l]));
                rp.max(rm)
            })
            .fold(0.0, f64::max)
    };
    let mut sweeps = 0;
    let mut res = f64::INFINITY;
    for sweep in 0..cfg.max_sweeps {
        sweeps = sweep + 1;
        // forward half in layer order, so each update sees the one before
        for l in 0..big_l {
            let target = clamp(1.0 / matched_plus(law, &powers, l, &gp, &gm, &cfg.method) - gm[l]);
            gp[l] = gp[l].powf(1.0 - cfg.damping) * target.powf(cfg.damping);
        }
        for l in (0..big_l).rev() {
            let target = clamp(1.0 / matched_minus(law, &powers, l, &gp, &gm, &cfg.method) - gp[l]);
            gm[l] = gm[l].powf(1.0 - cfg.damping) * target.powf(cfg.damping);
        }
        if gp.iter().chain(&gm).any(|g| !g.is_finite()) {
            return Err(Error::Diverged { layer: 0, iteration: sweep, detail: "matched recursion produced a non-finite precision".into() });
        }
        res = residual(&gp, &gm);
        if res <= cfg.tol {
            break;
        }
    }
    let eta: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| a + b).collect();
    Ok(MatchedFixedPoint { mse: eta.iter().map(|e| 1.0 / e).collect(), gamma_plus: gp, gamma_minus: gm, eta, residual: res, sweeps, converged: res <= cfg.tol })
}
