//! Linear-layer estimator in the singular-vector domain.
//!
//! With `W = V_out diag(s) V_in`, the layer decouples into scalar problems
//! over the rotated quantities `u_out = V_out^T r_minus`,
//! `u_in = V_in r_plus` and `bbar = V_out^T b`.

use crate::model::{LinearLayer, Precision};
use nalgebra::DVector;

/// Coefficients of the per-component estimates
/// `out = out_u u_out + out_x u_in + out_b bbar` and
/// `inp = in_u u_out + in_x u_in + in_b bbar`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearCoefs {
    pub out_u: f64,
    pub out_x: f64,
    pub out_b: f64,
    pub in_u: f64,
    pub in_x: f64,
    pub in_b: f64,
}

pub fn linear_coefs(s: f64, noise: Precision, gamma_minus: f64, gamma_plus: f64) -> LinearCoefs {
    let (gm, gp) = (gamma_minus, gamma_plus);
    match noise {
        Precision::Finite(nu) => {
            let det = gm * gp + gm * nu * s * s + nu * gp;
            LinearCoefs {
                out_u: gm * (gp + nu * s * s) / det,
                out_x: nu * s * gp / det,
                out_b: nu * gp / det,
                in_u: nu * s * gm / det,
                in_x: gp * (gm + nu) / det,
                in_b: -nu * s * gm / det,
            }
        }
        Precision::Noiseless => {
            let d = gm * s * s + gp;
            LinearCoefs {
                out_u: gm * s * s / d,
                out_x: s * gp / d,
                out_b: gp / d,
                in_u: s * gm / d,
                in_x: gp / d,
                in_b: -s * gm / d,
            }
        }
    }
}

/// Input-side coefficients when the layer output is observed exactly.
pub fn observed_coefs(s: f64, noise: Precision, gamma_plus: f64) -> LinearCoefs {
    let zero = LinearCoefs { out_u: 0.0, out_x: 0.0, out_b: 0.0, in_u: 0.0, in_x: 0.0, in_b: 0.0 };
    match noise {
        Precision::Finite(nu) => {
            let d = gamma_plus + nu * s * s;
            LinearCoefs { in_u: nu * s / d, in_x: gamma_plus / d, in_b: -nu * s / d, ..zero }
        }
        Precision::Noiseless if s > 0.0 => LinearCoefs { in_u: 1.0 / s, in_x: 0.0, in_b: -1.0 / s, ..zero },
        Precision::Noiseless => LinearCoefs { in_x: 1.0, ..zero },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEstimate {
    pub zhat_plus: DVector<f64>,
    pub zhat_minus: DVector<f64>,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
}

/// Gaussian posterior means of `(z_out, z_in)` under the layer likelihood and
/// the two Gaussian beliefs, with their average diagonal sensitivities.
pub fn linear_denoise(layer: &LinearLayer, r_minus: &DVector<f64>, gamma_minus: f64, r_plus: &DVector<f64>, gamma_plus: f64) -> LayerEstimate {
    let f = &layer.factors;
    let (n_out, n_in) = (f.n_out(), f.n_in());
    let u_out = f.left.tr_mul(r_minus);
    let u_in = &f.right * r_plus;
    let bbar = layer.bias_rotated();
    let mut g_out = DVector::zeros(n_out);
    let mut g_in = DVector::zeros(n_in);
    let mut a_out = 0.0;
    let mut a_in = 0.0;
    for j in 0..n_out.max(n_in) {
        let c = linear_coefs(f.sv(j), layer.noise, gamma_minus, gamma_plus);
        if j < n_out {
            let x = if j < n_in { u_in[j] } else { 0.0 };
            g_out[j] = c.out_u * u_out[j] + c.out_x * x + c.out_b * bbar[j];
            a_out += c.out_u;
        }
        if j < n_in {
            let (u, b) = if j < n_out { (u_out[j], bbar[j]) } else { (0.0, 0.0) };
            g_in[j] = c.in_u * u + c.in_x * u_in[j] + c.in_b * b;
            a_in += c.in_x;
        }
    }
    LayerEstimate {
        zhat_plus: &f.left * g_out,
        zhat_minus: f.right.tr_mul(&g_in),
        alpha_plus: a_out / n_out as f64,
        alpha_minus: a_in / n_in as f64,
    }
}

/// Estimate of the layer input when its output `y` is observed.
pub fn linear_observed(layer: &LinearLayer, y: &DVector<f64>, r_plus: &DVector<f64>, gamma_plus: f64) -> (DVector<f64>, f64) {
    let f = &layer.factors;
    let (n_out, n_in) = (f.n_out(), f.n_in());
    let u_out = f.left.tr_mul(y);
    let u_in = &f.right * r_plus;
    let bbar = layer.bias_rotated();
    let mut g_in = DVector::zeros(n_in);
    let mut a_in = 0.0;
    for j in 0..n_in {
        let c = observed_coefs(f.sv(j), layer.noise, gamma_plus);
        let (u, b) = if j < n_out { (u_out[j], bbar[j]) } else { (0.0, 0.0) };
        g_in[j] = c.in_u * u + c.in_x * u_in[j] + c.in_b * b;
        a_in += c.in_x;
    }
    (f.right.tr_mul(&g_in), a_in / n_in as f64)
}
