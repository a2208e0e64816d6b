//! Layer-wise estimators used by the message passing engine.

pub mod linear;
pub mod scalar;

use crate::error::Result;
use crate::model::{Layer, NonlinearLayer};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use linear::{linear_coefs, linear_denoise, linear_observed, observed_coefs, LinearCoefs, LayerEstimate};
pub use scalar::{log_joint_density, scalar_map, scalar_mmse, Downstream, ScalarEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Map,
    #[default]
    Mmse,
}

impl std::str::FromStr for Mode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "map" => Ok(Mode::Map),
            "mmse" => Ok(Mode::Mmse),
            other => Err(crate::error::Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Estimate for the standard normal input: `(zhat, alpha)`.
pub fn input_denoise(r_minus: &DVector<f64>, gamma_minus: f64) -> (DVector<f64>, f64) {
    let a = gamma_minus / (gamma_minus + 1.0);
    (r_minus * a, a)
}

pub fn scalar_estimate(mode: Mode, layer: &NonlinearLayer, down: Downstream, r_plus: f64, gamma_plus: f64) -> Result<ScalarEstimate> {
    match mode {
        Mode::Mmse => scalar_mmse(layer.activation, layer.noise, down, r_plus, gamma_plus),
        Mode::Map => scalar_map(layer.activation, layer.noise, down, r_plus, gamma_plus),
    }
}

/// Estimate for a hidden layer given beliefs on both sides.
pub fn layer_denoise(
    mode: Mode,
    layer: &Layer,
    r_minus: &DVector<f64>,
    gamma_minus: f64,
    r_plus: &DVector<f64>,
    gamma_plus: f64,
) -> Result<LayerEstimate> {
    match layer {
        Layer::Linear(l) => Ok(linear_denoise(l, r_minus, gamma_minus, r_plus, gamma_plus)),
        Layer::Nonlinear(nl) => {
            let n = r_plus.len();
            let mut zp = DVector::zeros(n);
            let mut zm = DVector::zeros(n);
            let (mut ap, mut am) = (0.0, 0.0);
            for i in 0..n {
                let e = scalar_estimate(mode, nl, Downstream::Belief { r: r_minus[i], gamma: gamma_minus }, r_plus[i], gamma_plus)?;
                zp[i] = e.z;
                zm[i] = e.x;
                ap += e.dz;
                am += e.dx;
            }
            Ok(LayerEstimate { zhat_plus: zp, zhat_minus: zm, alpha_plus: ap / n as f64, alpha_minus: am / n as f64 })
        }
    }
}

/// Estimate of the final layer's input from the measurement.
pub fn output_denoise(mode: Mode, layer: &Layer, y: &DVector<f64>, r_plus: &DVector<f64>, gamma_plus: f64) -> Result<(DVector<f64>, f64)> {
    match layer {
        Layer::Linear(l) => Ok(linear_observed(l, y, r_plus, gamma_plus)),
        Layer::Nonlinear(nl) => {
            let n = r_plus.len();
            let mut zm = DVector::zeros(n);
            let mut am = 0.0;
            for i in 0..n {
                let e = scalar_estimate(mode, nl, Downstream::Observed(y[i]), r_plus[i], gamma_plus)?;
                zm[i] = e.x;
                am += e.dx;
            }
            Ok((zm, am / n as f64))
        }
    }
}

/// Average diagonal derivatives `<d zhat_plus / d r_minus>` and
/// `<d zhat_minus / d r_plus>` by central differences, one coordinate at a time.
pub fn divergence_finite_difference<F>(f: F, r_minus: &DVector<f64>, r_plus: &DVector<f64>, eps: f64) -> Result<(f64, f64)>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)>,
{
    let mut a_plus = 0.0;
    for i in 0..r_minus.len() {
        let mut hi = r_minus.clone();
        let mut lo = r_minus.clone();
        hi[i] += eps;
        lo[i] -= eps;
        a_plus += (f(&hi, r_plus)?.0[i] - f(&lo, r_plus)?.0[i]) / (2.0 * eps);
    }
    let mut a_minus = 0.0;
    for i in 0..r_plus.len() {
        let mut hi = r_plus.clone();
        let mut lo = r_plus.clone();
        hi[i] += eps;
        lo[i] -= eps;
        a_minus += (f(r_minus, &hi)?.1[i] - f(r_minus, &lo)?.1[i]) / (2.0 * eps);
    }
    Ok((a_plus / r_minus.len() as f64, a_minus / r_plus.len() as f64))
}
