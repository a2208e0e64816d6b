//! The ML-VAMP iteration: alternating forward and backward sweeps of
//! layer-wise estimation and Gaussian message extrinsication.

use crate::denoisers::{input_denoise, layer_denoise, output_denoise, Mode};
use crate::error::{Error, Result};
use crate::model::{NetworkSpec, SignalSet};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub mode: Mode,
    pub max_iters: usize,
    /// Precision of the initial backward messages `r_minus = 0`.
    pub gamma_init: f64,
    /// Geometric damping of precision updates; 1 is undamped.
    pub damping: f64,
    /// Convex damping of the mean messages; 1 is undamped.
    pub message_damping: f64,
    /// Stop once the largest relative change of any estimate falls below this.
    pub convergence_tol: f64,
    pub alpha_clip: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Mmse,
            max_iters: 50,
            gamma_init: 1e-3,
            damping: 1.0,
            message_damping: 1.0,
            convergence_tol: 1e-8,
            alpha_clip: 1e-6,
            gamma_min: 1e-11,
            gamma_max: 1e11,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.gamma_init > 0.0 && self.gamma_init.is_finite()) {
            return bad("gamma_init must be positive");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) || !(self.message_damping > 0.0 && self.message_damping <= 1.0) {
            return bad("damping factors must lie in (0, 1]");
        }
        if !(self.alpha_clip > 0.0 && self.alpha_clip < 0.5) {
            return bad("alpha_clip must lie in (0, 0.5)");
        }
        if !(self.gamma_min > 0.0 && self.gamma_min < self.gamma_max) {
            return bad("need 0 < gamma_min < gamma_max");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be nonnegative");
        }
        Ok(())
    }
}

/// Messages and estimates attached to signal `z_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub r_plus: DVector<f64>,
    pub r_minus: DVector<f64>,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub eta_plus: f64,
    pub eta_minus: f64,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
    pub zhat_plus: DVector<f64>,
    pub zhat_minus: DVector<f64>,
}

impl LayerState {
    fn new(n: usize, gamma_init: f64) -> Self {
        Self {
            r_plus: DVector::zeros(n),
            r_minus: DVector::zeros(n),
            gamma_plus: f64::NAN,
            gamma_minus: gamma_init,
            eta_plus: f64::NAN,
            eta_minus: f64::NAN,
            alpha_plus: f64::NAN,
            alpha_minus: f64::NAN,
            zhat_plus: DVector::zeros(n),
            zhat_minus: DVector::zeros(n),
        }
    }
}

/// State of all `L` signals `z_0, ..., z_{L-1}` after a number of iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    pub layers: Vec<LayerState>,
    pub iterations: usize,
}

impl MessageState {
    pub fn initial(spec: &NetworkSpec, gamma_init: f64) -> Self {
        let dims = spec.dims();
        Self { layers: (0..spec.num_layers()).map(|l| LayerState::new(dims[l], gamma_init)).collect(), iterations: 0 }
    }

    /// Latest estimate of each signal (the backward-pass estimate).
    pub fn estimates(&self) -> Vec<DVector<f64>> {
        self.layers.iter().map(|l| l.zhat_minus.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub nmse_db: Option<f64>,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
    pub consistency: f64,
}

/// Per-layer quantities after half-iteration `half_iter`: `2k` is the
/// forward sweep of iteration `k`, `2k + 1` its backward sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfIterRecord {
    pub half_iter: usize,
    pub layers: Vec<LayerSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEvent {
    pub iteration: usize,
    pub layer: usize,
    pub quantity: String,
    pub raw: f64,
    pub clipped: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<HalfIterRecord>,
    pub clips: Vec<ClipEvent>,
}

#[derive(Debug, Clone)]
pub struct EngineRun {
    pub state: MessageState,
    pub trace: IterationTrace,
    pub converged: bool,
}

/// `10 log10(||est - truth||^2 / ||truth||^2)`.
pub fn nmse_db(est: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::DimensionMismatch { what: "estimate".into(), expected: truth.len(), found: est.len() });
    }
    let den = truth.norm_squared();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("reference signal has zero norm".into()));
    }
    Ok(10.0 * ((est - truth).norm_squared() / den).log10())
}

fn rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let n = a.norm();
    let d = (a - b).norm();
    if n > 0.0 {
        d / n
    } else if d == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

struct Updater<'a> {
    cfg: &'a EngineConfig,
    iteration: usize,
    clips: &'a mut Vec<ClipEvent>,
}

impl Updater<'_> {
    fn clip(&mut self, layer: usize, quantity: &str, raw: f64, lo: f64, hi: f64) -> Result<f64> {
        if !raw.is_finite() {
            return Err(Error::Diverged { layer, iteration: self.iteration, detail: format!("{quantity} is {raw}") });
        }
        let c = raw.clamp(lo, hi);
        if c != raw {
            self.clips.push(ClipEvent { iteration: self.iteration, layer, quantity: quantity.into(), raw, clipped: c });
        }
        Ok(c)
    }

    /// Extrinsic message from an estimate: returns `(alpha, eta, gamma_out, r_out)`.
    fn extrinsic(
        &mut self,
        layer: usize,
        dir: &str,
        zhat: &DVector<f64>,
        alpha: f64,
        gamma_in: f64,
        r_in: &DVector<f64>,
        gamma_old: f64,
        r_old: &DVector<f64>,
    ) -> Result<(f64, f64, f64, DVector<f64>)> {
        if zhat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { layer, iteration: self.iteration, detail: format!("non-finite {dir} estimate") });
        }
        let a = self.clip(layer, &format!("alpha_{dir}"), alpha, self.cfg.alpha_clip, 1.0 - self.cfg.alpha_clip)?;
        let eta = gamma_in / a;
        let mut g = self.clip(layer, &format!("gamma_{dir}"), eta - gamma_in, self.cfg.gamma_min, self.cfg.gamma_max)?;
        if self.cfg.damping < 1.0 && gamma_old.is_finite() {
            g = gamma_old.powf(1.0 - self.cfg.damping) * g.powf(self.cfg.damping);
        }
        let mut r = (zhat - r_in * a) / (1.0 - a);
        if self.cfg.message_damping < 1.0 && self.iteration > 0 {
            r = r * self.cfg.message_damping + r_old * (1.0 - self.cfg.message_damping);
        }
        Ok((a, eta, g, r))
    }
}

fn snapshot(state: &MessageState, truth: Option<&SignalSet>, forward: bool) -> Vec<LayerSnapshot> {
    state
        .layers
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let z = if forward { &s.zhat_plus } else { &s.zhat_minus };
            LayerSnapshot {
                nmse_db: truth.and_then(|t| nmse_db(z, &t.z[l]).ok()),
                gamma_plus: s.gamma_plus,
                gamma_minus: s.gamma_minus,
                alpha_plus: s.alpha_plus,
                alpha_minus: s.alpha_minus,
                consistency: rel_diff(&s.zhat_plus, &s.zhat_minus),
            }
        })
        .collect()
}

/// Run ML-VAMP on measurement `y`. When `truth` is given, the trace records
/// the NMSE of every estimate at every half-iteration.
pub fn run(spec: &NetworkSpec, y: &DVector<f64>, cfg: &EngineConfig, truth: Option<&SignalSet>) -> Result<EngineRun> {
    let state = MessageState::initial(spec, cfg.gamma_init);
    run_from(spec, y, cfg, truth, state)
}

/// Continue iterating from a given state.
pub fn run_from(spec: &NetworkSpec, y: &DVector<f64>, cfg: &EngineConfig, truth: Option<&SignalSet>, mut state: MessageState) -> Result<EngineRun> {
    cfg.validate()?;
    if y.len() != spec.output_dim() {
        return Err(Error::DimensionMismatch { what: "measurement".into(), expected: spec.output_dim(), found: y.len() });
    }
    let big_l = spec.num_layers();
    let mut trace = IterationTrace::default();
    let mut converged = false;
    let start = state.iterations;
    for k in start..start + cfg.max_iters {
        let prev: Vec<(DVector<f64>, DVector<f64>)> = state.layers.iter().map(|s| (s.zhat_plus.clone(), s.zhat_minus.clone())).collect();
        let mut up = Updater { cfg, iteration: k, clips: &mut trace.clips };

        // forward sweep
        for l in 0..big_l {
            let (zhat, alpha) = if l == 0 {
                let s = &state.layers[0];
                input_denoise(&s.r_minus, s.gamma_minus)
            } else {
                let (lo, hi) = state.layers.split_at(l);
                let (up_s, s) = (&lo[l - 1], &hi[0]);
                let e = layer_denoise(cfg.mode, spec.layer(l), &s.r_minus, s.gamma_minus, &up_s.r_plus, up_s.gamma_plus)?;
                (e.zhat_plus, e.alpha_plus)
            };
            let s = &state.layers[l];
            let (a, eta, g, r) = up.extrinsic(l, "plus", &zhat, alpha, s.gamma_minus, &s.r_minus, s.gamma_plus, &s.r_plus)?;
            let s = &mut state.layers[l];
            s.zhat_plus = zhat;
            s.alpha_plus = a;
            s.eta_plus = eta;
            s.gamma_plus = g;
            s.r_plus = r;
        }
        trace.records.push(HalfIterRecord { half_iter: 2 * k, layers: snapshot(&state, truth, true) });

        // backward sweep
        for l in (0..big_l).rev() {
            let s = &state.layers[l];
            let (zhat, alpha) = if l == big_l - 1 {
                output_denoise(cfg.mode, spec.layer(big_l), y, &s.r_plus, s.gamma_plus)?
            } else {
                let down = &state.layers[l + 1];
                let e = layer_denoise(cfg.mode, spec.layer(l + 1), &down.r_minus, down.gamma_minus, &s.r_plus, s.gamma_plus)?;
                (e.zhat_minus, e.alpha_minus)
            };
            let mut up = Updater { cfg, iteration: k, clips: &mut trace.clips };
            let (a, eta, g, r) = up.extrinsic(l, "minus", &zhat, alpha, s.gamma_plus, &s.r_plus, s.gamma_minus, &s.r_minus)?;
            let s = &mut state.layers[l];
            s.zhat_minus = zhat;
            s.alpha_minus = a;
            s.eta_minus = eta;
            s.gamma_minus = g;
            s.r_minus = r;
        }
        trace.records.push(HalfIterRecord { half_iter: 2 * k + 1, layers: snapshot(&state, truth, false) });
        state.iterations = k + 1;

        if k > start {
            let change = state
                .layers
                .iter()
                .zip(&prev)
                .map(|(s, (p, m))| rel_diff(&s.zhat_plus, p).max(rel_diff(&s.zhat_minus, m)))
                .fold(0.0, f64::max);
            if change < cfg.convergence_tol {
                converged = true;
                break;
            }
        }
    }
    Ok(EngineRun { state, trace, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmse_examples() {
        let t = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(nmse_db(&t, &t).unwrap(), f64::NEG_INFINITY);
        let e = DVector::from_vec(vec![0.0, 0.0]);
        assert!((nmse_db(&e, &t).unwrap() - 0.0).abs() < 1e-15);
        assert!(matches!(nmse_db(&t, &e), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn config_validation() {
        assert!(EngineConfig::default().validate().is_ok());
        let c = EngineConfig { damping: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = EngineConfig { gamma_min: 1.0, gamma_max: 0.5, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
