//! Scalar Gaussian helpers: densities, log-CDF, Mills ratios and truncated moments.

use statrs::function::erf;
use std::f64::consts::{PI, SQRT_2};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x / SQRT_2)
}

/// Inverse of the standard normal CDF.
pub fn norm_ppf(p: f64) -> f64 {
    let x = -SQRT_2 * erf::erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    // one Newton step polishes the tail accuracy
    if x < 0.0 {
        x - (norm_cdf(x) - p) / norm_pdf(x)
    } else {
        x + (norm_cdf(-x) - (1.0 - p)) / norm_pdf(x)
    }
}

/// `Phi(-t) / phi(t)` for `t >= 5`, by continued fraction.
fn mills_upper(t: f64) -> f64 {
    // Lentz evaluation of 1/(t + 1/(t + 2/(t + 3/(t + ...))))
    let tiny = 1e-300;
    let mut f = t;
    let mut c = t;
    let mut d = 0.0;
    for k in 1..200 {
        let a = k as f64;
        d = t + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = t + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

pub fn log_norm_cdf(x: f64) -> f64 {
    if x > 5.0 {
        (-norm_cdf(-x)).ln_1p()
    } else if x > -5.0 {
        norm_cdf(x).ln()
    } else {
        mills_upper(-x).ln() - 0.5 * x * x - LN_SQRT_2PI
    }
}

/// Inverse Mills ratio `phi(x) / Phi(x)`.
pub fn inv_mills(x: f64) -> f64 {
    if x > -5.0 {
        norm_pdf(x) / norm_cdf(x)
    } else {
        1.0 / mills_upper(-x)
    }
}

/// `log(Phi(b) - Phi(a))` for `a < b`, stable in both tails.
pub fn log_norm_diff(a: f64, b: f64) -> f64 {
    if a >= b {
        return f64::NEG_INFINITY;
    }
    if a == f64::NEG_INFINITY {
        return log_norm_cdf(b);
    }
    if b == f64::INFINITY {
        return log_norm_cdf(-a);
    }
    if a > 0.0 {
        // both in the upper tail: Phi(-a) - Phi(-b)
        let la = log_norm_cdf(-a);
        let lb = log_norm_cdf(-b);
        la + (-(lb - la).exp()).ln_1p()
    } else if b < 0.0 {
        let la = log_norm_cdf(a);
        let lb = log_norm_cdf(b);
        lb + (-(la - lb).exp()).ln_1p()
    } else {
        (1.0 - norm_cdf(a) - norm_cdf(-b)).ln()
    }
}

/// Mean and variance of a standard normal truncated to `(a, b)`.
pub fn std_truncated_moments(a: f64, b: f64) -> (f64, f64) {
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return (0.0, 1.0);
    }
    if a == f64::NEG_INFINITY {
        let l = inv_mills(b);
        let mean = -l;
        let var = (1.0 - b * l - l * l).max(0.0);
        return (mean, var);
    }
    if b == f64::INFINITY {
        let (m, v) = std_truncated_moments(f64::NEG_INFINITY, -a);
        return (-m, v);
    }
    if b - a < 1e-7 {
        let mid = 0.5 * (a + b);
        return (mid, (b - a) * (b - a) / 12.0);
    }
    // finite interval: work with ratios relative to the log mass
    let lz = log_norm_diff(a, b);
    let pa = (-0.5 * a * a - LN_SQRT_2PI - lz).exp();
    let pb = (-0.5 * b * b - LN_SQRT_2PI - lz).exp();
    let mean = pa - pb;
    let second = 1.0 + a * pa - b * pb;
    let var = (second - mean * mean).max(0.0);
    (mean.clamp(a, b), var)
}

/// Density of `N(mean, var)` at `x`, in log domain.
pub fn log_normal_density(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * d * d / var - 0.5 * (2.0 * PI * var).ln()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
