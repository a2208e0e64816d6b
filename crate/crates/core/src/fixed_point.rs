//! Residuals of the ML-VAMP fixed-point conditions.

use crate::denoisers::Mode;
use crate::engine::MessageState;
use crate::model::{Layer, NetworkSpec};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Per-layer residuals, each scaled to be dimensionless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    /// `||zhat_plus - zhat_minus|| / ||zhat_plus||`.
    pub consistency: Vec<f64>,
    /// Mismatch of `eta_plus`, `eta_minus` and `gamma_plus + gamma_minus`,
    /// relative to the latter.
    pub eta: Vec<f64>,
    /// Distance of both estimates from the precision-weighted combination of
    /// the two messages, relative to the estimate norm.
    pub combination: Vec<f64>,
    /// Norm of the MAP objective gradient at the estimates, relative to the
    /// sum of the norms of its terms. `None` when the measurement layer is
    /// deterministic.
    pub map_stationarity: Option<f64>,
    /// Disagreement of the two belief variances (and means) per layer, in
    /// MMSE mode.
    pub moment_match: Option<Vec<f64>>,
}

impl FixedPointReport {
    pub fn max_residual(&self) -> f64 {
        let mut m = self.consistency.iter().chain(&self.eta).chain(&self.combination).copied().fold(0.0, f64::max);
        if let Some(s) = self.map_stationarity {
            m = m.max(s);
        }
        if let Some(mm) = &self.moment_match {
            m = mm.iter().copied().fold(m, f64::max);
        }
        m
    }
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let n = a.norm();
    let d = (a - b).norm();
    if d == 0.0 {
        0.0
    } else {
        d / n
    }
}

pub fn fixed_point_report(spec: &NetworkSpec, y: &DVector<f64>, state: &MessageState, mode: Mode) -> FixedPointReport {
    let mut consistency = Vec::new();
    let mut eta = Vec::new();
    let mut combination = Vec::new();
    let mut moments = Vec::new();
    for s in &state.layers {
        let c = rel(&s.zhat_plus, &s.zhat_minus);
        let sum = s.gamma_plus + s.gamma_minus;
        let comb = (&s.r_plus * s.gamma_plus + &s.r_minus * s.gamma_minus) / sum;
        consistency.push(c);
        eta.push(((s.eta_plus - sum).abs().max((s.eta_minus - sum).abs())) / sum);
        combination.push(rel(&s.zhat_plus, &comb).max(rel(&s.zhat_minus, &comb)));
        let var_gap = (s.alpha_plus / s.gamma_minus - s.alpha_minus / s.gamma_plus).abs() * sum;
        moments.push(var_gap.max(c));
    }
    FixedPointReport {
        consistency,
        eta,
        combination,
        map_stationarity: map_stationarity(spec, y, &state.estimates()),
        moment_match: (mode == Mode::Mmse).then_some(moments),
    }
}

/// Relative gradient norm of the negative log joint density at the given
/// estimates of `z_0, ..., z_{L-1}`.
///
/// Outputs of deterministic layers are recomputed from their inputs and the
/// gradient is back-propagated through them, so it is taken with respect to
/// the free signals only. At activation kinks the subgradient weight in
/// `[0, 1]` is chosen per component to minimize the gradient magnitude.
pub fn map_stationarity(spec: &NetworkSpec, y: &DVector<f64>, est: &[DVector<f64>]) -> Option<f64> {
    let big_l = spec.num_layers();
    if spec.layer(big_l).is_deterministic() {
        return None;
    }
    let mut z: Vec<DVector<f64>> = Vec::with_capacity(big_l + 1);
    z.push(est[0].clone());
    for l in 1..big_l {
        let layer = spec.layer(l);
        z.push(if layer.is_deterministic() {
            match layer {
                Layer::Linear(lin) => lin.mean_output(&z[l - 1]),
                Layer::Nonlinear(nl) => z[l - 1].map(|v| nl.activation.apply(v)),
            }
        } else {
            est[l].clone()
        });
    }
    z.push(y.clone());

    let mut grad: Vec<DVector<f64>> = z.iter().map(|v| DVector::zeros(v.len())).collect();
    let mut scale = z[0].norm();
    grad[0] += &z[0];
    // weighted residuals of the stochastic terms
    let mut resid: Vec<Option<DVector<f64>>> = vec![None; big_l + 1];
    for l in 1..=big_l {
        let (mean, prec) = match spec.layer(l) {
            Layer::Linear(lin) => (lin.mean_output(&z[l - 1]), lin.noise.finite()),
            Layer::Nonlinear(nl) => (z[l - 1].map(|v| nl.activation.apply(v)), nl.noise.precision()),
        };
        if let Some(p) = prec {
            let e = (&z[l] - mean) * p;
            if l < big_l {
                scale += e.norm();
                grad[l] += &e;
            }
            resid[l] = Some(e);
        }
    }
    for l in (1..=big_l).rev() {
        let layer = spec.layer(l);
        let v = match &resid[l] {
            Some(e) => -e,
            None if l < big_l => grad[l].clone(),
            None => continue,
        };
        let pulled = match layer {
            Layer::Linear(lin) => lin.factors.apply_transpose(&v),
            Layer::Nonlinear(nl) => {
                let x = &z[l - 1];
                let kinks = nl.activation.kinks();
                DVector::from_fn(x.len(), |i, _| {
                    let xi = x[i];
                    if kinks.iter().any(|k| (xi - k).abs() <= 1e-12 * (1.0 + xi.abs())) {
                        // slope range at the kink is [0, 1] for relu and {0} for sign
                        let hi = if nl.activation == crate::model::Activation::Relu { 1.0 } else { 0.0 };
                        let rest = grad[l - 1][i];
                        let d = if v[i] != 0.0 { (-rest / v[i]).clamp(0.0, hi) } else { 0.0 };
                        d * v[i]
                    } else {
                        nl.activation.derivative(xi) * v[i]
                    }
                })
            }
        };
        if resid[l].is_some() {
            scale += pulled.norm();
        }
        grad[l - 1] += pulled;
    }
    let mut g2 = grad[0].norm_squared();
    for l in 1..big_l {
        if !spec.layer(l).is_deterministic() {
            g2 += grad[l].norm_squared();
        }
    }
    Some(if scale > 0.0 { g2.sqrt() / scale } else { 0.0 })
}

