//! Scalar estimators for one component of a separable layer
//! `z = phi(x) + xi`, given Gaussian beliefs `x ~ N(r_plus, 1/gamma_plus)`
//! upstream and either a belief `z ~ N(r, 1/gamma)` or an exact observation
//! of `z` downstream.

use crate::error::{Error, Result};
use crate::gauss::{log_norm_diff, logistic, logit, std_truncated_moments, LN_SQRT_2PI};
use crate::model::{Activation, NoiseModel, Piece};
use crate::quadrature::QuadratureRule;
use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Downstream {
    Belief { r: f64, gamma: f64 },
    Observed(f64),
}

/// Estimates of the layer output `z` and input `x`, with the derivatives
/// `dz = d z / d r` and `dx = d x / d r_plus` used for the Onsager terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarEstimate {
    pub z: f64,
    pub x: f64,
    pub dz: f64,
    pub dx: f64,
}

/// Downstream belief folded into a Gaussian factor `N(phi(x); r, v)`, plus
/// the shrinkage `z = kappa r + (1 - kappa) phi(x)` and residual variance.
#[derive(Debug, Clone, Copy)]
struct Folded {
    r: f64,
    v: f64,
    kappa: f64,
    z_extra: f64,
    gamma: f64,
}

fn fold(down: Downstream, noise: NoiseModel) -> Folded {
    match (down, noise) {
        (Downstream::Belief { r, gamma }, NoiseModel::None) => Folded { r, v: 1.0 / gamma, kappa: 0.0, z_extra: 0.0, gamma },
        (Downstream::Belief { r, gamma }, NoiseModel::Gaussian { precision }) => Folded {
            r,
            v: 1.0 / gamma + 1.0 / precision,
            kappa: gamma / (gamma + precision),
            z_extra: 1.0 / (gamma + precision),
            gamma,
        },
        (Downstream::Observed(y), NoiseModel::Gaussian { precision }) => Folded { r: y, v: 1.0 / precision, kappa: 1.0, z_extra: 0.0, gamma: 0.0 },
        (Downstream::Observed(y), NoiseModel::None) => Folded { r: y, v: 0.0, kappa: 1.0, z_extra: 0.0, gamma: 0.0 },
    }
}

#[derive(Debug, Clone, Copy)]
struct PieceMoments {
    log_w: f64,
    mean: f64,
    var: f64,
    slope: f64,
    offset: f64,
}

fn piece_moments(p: &Piece, f: &Folded, r_plus: f64, gamma_plus: f64) -> PieceMoments {
    let a = p.slope;
    let prec = gamma_plus + a * a / f.v;
    let mu = (gamma_plus * r_plus + a * (f.r - p.offset) / f.v) / prec;
    let sd = prec.sqrt().recip();
    let lo = (p.lo - mu) / sd;
    let hi = (p.hi - mu) / sd;
    let ev_var = f.v + a * a / gamma_plus;
    let d = a * r_plus + p.offset - f.r;
    let log_w = -0.5 * d * d / ev_var - 0.5 * ev_var.ln() + log_norm_diff(lo, hi);
    let (tm, tv) = std_truncated_moments(lo, hi);
    PieceMoments { log_w, mean: mu + sd * tm, var: tv / prec, slope: a, offset: p.offset }
}

fn mix(parts: &[PieceMoments], f: &Folded, gamma_plus: f64) -> ScalarEstimate {
    let top = parts.iter().map(|p| p.log_w).fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = parts.iter().map(|p| (p.log_w - top).exp()).collect();
    let total: f64 = ws.iter().sum();
    let mut ex = 0.0;
    let mut ez = 0.0;
    for (p, w) in parts.iter().zip(&ws) {
        let pi = w / total;
        ex += pi * p.mean;
        ez += pi * (f.kappa * f.r + (1.0 - f.kappa) * (p.slope * p.mean + p.offset));
    }
    let mut vx = 0.0;
    let mut vz = f.z_extra;
    for (p, w) in parts.iter().zip(&ws) {
        let pi = w / total;
        vx += pi * (p.var + (p.mean - ex).powi(2));
        let mz = f.kappa * f.r + (1.0 - f.kappa) * (p.slope * p.mean + p.offset);
        vz += pi * ((1.0 - f.kappa).powi(2) * p.slope * p.slope * p.var + (mz - ez).powi(2));
    }
    ScalarEstimate { z: ez, x: ex, dz: f.gamma * vz, dx: gamma_plus * vx }
}

fn observation_mismatch(y: f64, act: Activation) -> Error {
    Error::NumericFailure(format!("observation {y} lies outside the range of {}", act.name()))
}

fn consistent(c: f64, y: f64) -> bool {
    (c - y).abs() <= 1e-12 * (1.0 + y.abs())
}

fn piecewise_mmse_exact(pieces: &[Piece], act: Activation, y: f64, r_plus: f64, gamma_plus: f64) -> Result<ScalarEstimate> {
    for p in pieces.iter().filter(|p| p.slope != 0.0) {
        let x = (y - p.offset) / p.slope;
        if x > p.lo && x < p.hi {
            return Ok(ScalarEstimate { z: y, x, dz: 0.0, dx: 0.0 });
        }
    }
    let sd = gamma_plus.sqrt().recip();
    let parts: Vec<PieceMoments> = pieces
        .iter()
        .filter(|p| p.slope == 0.0 && consistent(p.offset, y))
        .map(|p| {
            let lo = (p.lo - r_plus) / sd;
            let hi = (p.hi - r_plus) / sd;
            let (tm, tv) = std_truncated_moments(lo, hi);
            PieceMoments { log_w: log_norm_diff(lo, hi), mean: r_plus + sd * tm, var: tv / gamma_plus, slope: 0.0, offset: p.offset }
        })
        .collect();
    if parts.is_empty() {
        return Err(observation_mismatch(y, act));
    }
    let f = Folded { r: y, v: 0.0, kappa: 1.0, z_extra: 0.0, gamma: 0.0 };
    Ok(mix(&parts, &f, gamma_plus))
}

fn piecewise_map_exact(pieces: &[Piece], act: Activation, y: f64, r_plus: f64) -> Result<ScalarEstimate> {
    let mut best: Option<(f64, f64, f64)> = None;
    for p in pieces.iter().rev() {
        let cand = if p.slope != 0.0 {
            let x = (y - p.offset) / p.slope;
            (x >= p.lo && x <= p.hi).then_some((x, 0.0))
        } else if consistent(p.offset, y) {
            let x = r_plus.clamp(p.lo, p.hi);
            Some((x, if x > p.lo && x < p.hi { 1.0 } else { 0.0 }))
        } else {
            None
        };
        if let Some((x, dx)) = cand {
            let cost = (x - r_plus).powi(2);
            if best.map_or(true, |b| cost < b.0) {
                best = Some((cost, x, dx));
            }
        }
    }
    let (_, x, dx) = best.ok_or_else(|| observation_mismatch(y, act))?;
    Ok(ScalarEstimate { z: y, x, dz: 0.0, dx })
}

/// Posterior mean for a piecewise-linear activation, in closed form.
fn piecewise_mmse(pieces: &[Piece], act: Activation, f: &Folded, r_plus: f64, gamma_plus: f64) -> Result<ScalarEstimate> {
    if f.v == 0.0 {
        return piecewise_mmse_exact(pieces, act, f.r, r_plus, gamma_plus);
    }
    let mut parts = [PieceMoments { log_w: f64::NEG_INFINITY, mean: 0.0, var: 0.0, slope: 0.0, offset: 0.0 }; 2];
    let n = pieces.len();
    for (slot, p) in parts.iter_mut().zip(pieces) {
        *slot = piece_moments(p, f, r_plus, gamma_plus);
    }
    Ok(mix(&parts[..n], f, gamma_plus))
}

/// Joint MAP for a piecewise-linear activation. Ties favour the right-most
/// piece, so relu resolves ties to the `x >= 0` branch.
fn piecewise_map(pieces: &[Piece], act: Activation, f: &Folded, r_plus: f64, gamma_plus: f64) -> Result<ScalarEstimate> {
    if f.v == 0.0 {
        return piecewise_map_exact(pieces, act, f.r, r_plus);
    }
    let mut best: Option<(f64, f64, f64, f64, &Piece)> = None;
    for p in pieces.iter().rev() {
        let a = p.slope;
        let prec = gamma_plus + a * a / f.v;
        let mu = (gamma_plus * r_plus + a * (f.r - p.offset) / f.v) / prec;
        let x = mu.clamp(p.lo, p.hi);
        let cost = gamma_plus * (x - r_plus).powi(2) + (a * x + p.offset - f.r).powi(2) / f.v;
        let (dx, dxr) = if x == mu { (gamma_plus / prec, a / f.v / prec) } else { (0.0, 0.0) };
        if best.map_or(true, |b| cost < b.0) {
            best = Some((cost, x, dx, dxr, p));
        }
    }
    let (_, x, dx, dxr, p) = best.expect("activation has at least one piece");
    let phi = p.slope * x + p.offset;
    Ok(ScalarEstimate {
        z: f.kappa * f.r + (1.0 - f.kappa) * phi,
        x,
        dz: f.kappa + (1.0 - f.kappa) * p.slope * dxr,
        dx,
    })
}

const PANEL_ORDER: usize = 10;

fn panel_rule() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| QuadratureRule::gauss_legendre(PANEL_ORDER))
}

fn sigmoid_objective(x: f64, f: &Folded, r_plus: f64, gamma_plus: f64) -> (f64, f64, f64) {
    let s = logistic(x);
    let ds = s * (1.0 - s);
    let d2s = ds * (1.0 - 2.0 * s);
    let e = s - f.r;
    let j = 0.5 * gamma_plus * (x - r_plus).powi(2) + 0.5 * e * e / f.v;
    let g = gamma_plus * (x - r_plus) + ds * e / f.v;
    let h = gamma_plus + (ds * ds + d2s * e) / f.v;
    (j, g, h)
}

fn newton_min(mut x: f64, f: &Folded, r_plus: f64, gamma_plus: f64) -> f64 {
    let (mut j, mut g, mut h) = sigmoid_objective(x, f, r_plus, gamma_plus);
    for _ in 0..200 {
        // fall back to a gradient step scaled by the prior curvature when h <= 0
        let step = if h > 0.0 { g / h } else { g / gamma_plus };
        let mut t = 1.0;
        loop {
            let xn = x - t * step;
            let (jn, gn, hn) = sigmoid_objective(xn, f, r_plus, gamma_plus);
            // near the minimum the decrease in the objective is lost to
            // rounding, so changes at that level count as no increase
            if jn <= j + 8.0 * f64::EPSILON * j.abs() || t < 1e-12 {
                x = xn;
                (j, g, h) = (jn, gn, hn);
                break;
            }
            t *= 0.5;
        }
        if g == 0.0 || (t * step).abs() <= 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    x
}

/// Root of the objective gradient in `[a, b]`, given `g(a) <= 0 <= g(b)`:
/// Newton steps that stay inside the bracket, bisection otherwise.
fn bracketed_min(mut a: f64, mut b: f64, f: &Folded, r_plus: f64, gamma_plus: f64) -> f64 {
    let mut x = 0.5 * (a + b);
    for _ in 0..200 {
        let (_, g, h) = sigmoid_objective(x, f, r_plus, gamma_plus);
        if g == 0.0 {
            break;
        }
        if g < 0.0 {
            a = x;
        } else {
            b = x;
        }
        let newton = x - g / h;
        x = if h > 0.0 && newton > a && newton < b { newton } else { 0.5 * (a + b) };
        if b - a <= 1e-15 * (1.0 + x.abs()) || (h > 0.0 && (g / h).abs() <= 1e-16 * (1.0 + x.abs())) {
            break;
        }
    }
    x
}

/// Largest `|d^2 logistic / dx^2|`.
const MAX_LOGISTIC_CURVATURE: f64 = 0.096_225_044_864_937_6;

/// Global minimizer of the MAP objective. The objective is convex when the
/// prior curvature dominates the worst negative curvature of the likelihood
/// term; otherwise a grid over the region that can hold the minimizer
/// separates the local minima before polishing.
fn sigmoid_mode(f: &Folded, r_plus: f64, gamma_plus: f64) -> f64 {
    let width = 40.0 / gamma_plus.sqrt();
    let inv = logit(f.r.clamp(1e-12, 1.0 - 1e-12)).clamp(r_plus - width, r_plus + width);
    let mut candidates = vec![newton_min(r_plus, f, r_plus, gamma_plus), newton_min(inv, f, r_plus, gamma_plus)];
    let reach = f.r.abs().max((1.0 - f.r).abs());
    if gamma_plus * f.v < MAX_LOGISTIC_CURVATURE * reach {
        // beyond this distance the prior term alone exceeds the whole range
        // of the likelihood term
        let half = (reach * reach / (f.v * gamma_plus)).sqrt();
        let lo = (r_plus - half).max(-40.0);
        let hi = (r_plus + half).min(40.0);
        if lo < hi {
            let n = (((hi - lo) / 0.05).ceil() as usize).clamp(2, 4000);
            let step = (hi - lo) / n as f64;
            let xs: Vec<f64> = (0..=n).map(|i| lo + i as f64 * step).collect();
            let js: Vec<f64> = xs.iter().map(|&x| sigmoid_objective(x, f, r_plus, gamma_plus).0).collect();
            for i in 1..n {
                if js[i] <= js[i - 1] && js[i] <= js[i + 1] {
                    let ga = sigmoid_objective(xs[i - 1], f, r_plus, gamma_plus).1;
                    let gb = sigmoid_objective(xs[i + 1], f, r_plus, gamma_plus).1;
                    candidates.push(if ga <= 0.0 && gb >= 0.0 { bracketed_min(xs[i - 1], xs[i + 1], f, r_plus, gamma_plus) } else { newton_min(xs[i], f, r_plus, gamma_plus) });
                }
            }
        }
    }
    let mut x = candidates
        .into_iter()
        .map(|x| (sigmoid_objective(x, f, r_plus, gamma_plus).0, x))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one candidate")
        .1;
    // candidates in the same basin tie to rounding in the objective; plain
    // Newton steps settle the winner to full precision
    for _ in 0..8 {
        let (_, g, h) = sigmoid_objective(x, f, r_plus, gamma_plus);
        if h <= 0.0 || g == 0.0 {
            break;
        }
        let step = g / h;
        x -= step;
        if step.abs() <= 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    x
}

fn sigmoid_map(f: &Folded, r_plus: f64, gamma_plus: f64) -> Result<ScalarEstimate> {
    if f.v == 0.0 {
        return sigmoid_exact(f.r, true);
    }
    let x = sigmoid_mode(f, r_plus, gamma_plus);
    let (_, _, h) = sigmoid_objective(x, f, r_plus, gamma_plus);
    let s = logistic(x);
    let ds = s * (1.0 - s);
    let dxr = ds / f.v / h;
    Ok(ScalarEstimate {
        z: f.kappa * f.r + (1.0 - f.kappa) * s,
        x,
        dz: f.kappa + (1.0 - f.kappa) * ds * dxr,
        dx: gamma_plus / h,
    })
}

fn sigmoid_exact(y: f64, _map: bool) -> Result<ScalarEstimate> {
    if y > 0.0 && y < 1.0 {
        Ok(ScalarEstimate { z: y, x: logit(y), dz: 0.0, dx: 0.0 })
    } else {
        Err(observation_mismatch(y, Activation::Sigmoid))
    }
}

type Moments = [f64; 5];

/// Integral over `[a, b]` of `exp(j0 - J(x))` times `(1, d, d^2, s, s^2)`,
/// with `d = x - mode` and `s` the logistic of `x`.
fn panel(a: f64, b: f64, mode: f64, j0: f64, f: &Folded, r_plus: f64, gamma_plus: f64) -> Moments {
    let rule = panel_rule();
    let h = 0.5 * (b - a);
    let c = 0.5 * (a + b);
    let mut m = [0.0; 5];
    for (t, w) in rule.nodes.iter().zip(&rule.weights) {
        let x = c + h * t;
        let (j, _, _) = sigmoid_objective(x, f, r_plus, gamma_plus);
        let e = w * h * (j0 - j).exp();
        let d = x - mode;
        let s = logistic(x);
        m[0] += e;
        m[1] += e * d;
        m[2] += e * d * d;
        m[3] += e * s;
        m[4] += e * s * s;
    }
    m
}

#[allow(clippy::too_many_arguments)]
fn adaptive(a: f64, b: f64, whole: Moments, depth: u32, tol: f64, mode: f64, j0: f64, f: &Folded, r_plus: f64, gamma_plus: f64, acc: &mut Moments) {
    let mid = 0.5 * (a + b);
    let left = panel(a, mid, mode, j0, f, r_plus, gamma_plus);
    let right = panel(mid, b, mode, j0, f, r_plus, gamma_plus);
    let err = (left[0] + right[0] - whole[0]).abs() + (left[1] + right[1] - whole[1]).abs() + (left[2] + right[2] - whole[2]).abs();
    if err <= tol || depth == 0 {
        for k in 0..5 {
            acc[k] += left[k] + right[k];
        }
    } else {
        adaptive(a, mid, left, depth - 1, tol, mode, j0, f, r_plus, gamma_plus, acc);
        adaptive(mid, b, right, depth - 1, tol, mode, j0, f, r_plus, gamma_plus, acc);
    }
}

/// Point where the negative log posterior has risen by `rise` above its
/// minimum, searching from the mode in direction `dir`.
fn tail_bound(mode: f64, j0: f64, step: f64, dir: f64, rise: f64, f: &Folded, r_plus: f64, gamma_plus: f64) -> f64 {
    let mut d = step;
    for _ in 0..200 {
        let x = mode + dir * d;
        if sigmoid_objective(x, f, r_plus, gamma_plus).0 - j0 > rise {
            return x;
        }
        d *= 2.0;
    }
    mode + dir * d
}

/// Posterior moments by adaptive Gauss-Legendre quadrature on the region
/// where the posterior is non-negligible, split at the mode.
fn sigmoid_mmse(f: &Folded, r_plus: f64, gamma_plus: f64) -> Result<ScalarEstimate> {
    if f.v == 0.0 {
        return sigmoid_exact(f.r, false);
    }
    let mode = sigmoid_mode(f, r_plus, gamma_plus);
    let (j0, _, h) = sigmoid_objective(mode, f, r_plus, gamma_plus);
    let step = h.max(gamma_plus).sqrt().recip();
    let lo = tail_bound(mode, j0, step, -1.0, 46.0, f, r_plus, gamma_plus);
    let hi = tail_bound(mode, j0, step, 1.0, 46.0, f, r_plus, gamma_plus);
    // the mode carries density one, so the mass is at least of order `step`
    let tol = 1e-13 * step;
    let mut m = [0.0; 5];
    for (a, b) in [(lo, mode), (mode, hi)] {
        let whole = panel(a, b, mode, j0, f, r_plus, gamma_plus);
        adaptive(a, b, whole, 12, tol, mode, j0, f, r_plus, gamma_plus, &mut m);
    }
    let ed = m[1] / m[0];
    let vx = (m[2] / m[0] - ed * ed).max(0.0);
    let es = m[3] / m[0];
    let vs = (m[4] / m[0] - es * es).max(0.0);
    let z = f.kappa * f.r + (1.0 - f.kappa) * es;
    let vz = (1.0 - f.kappa).powi(2) * vs + f.z_extra;
    Ok(ScalarEstimate { z, x: mode + ed, dz: f.gamma * vz, dx: gamma_plus * vx })
}

/// Posterior-mean estimate of `(z, x)` for one component.
pub fn scalar_mmse(act: Activation, noise: NoiseModel, down: Downstream, r_plus: f64, gamma_plus: f64) -> Result<ScalarEstimate> {
    let f = fold(down, noise);
    match act.pieces() {
        Some(pieces) => piecewise_mmse(pieces, act, &f, r_plus, gamma_plus),
        None => sigmoid_mmse(&f, r_plus, gamma_plus),
    }
}

/// Joint MAP estimate of `(z, x)` for one component.
pub fn scalar_map(act: Activation, noise: NoiseModel, down: Downstream, r_plus: f64, gamma_plus: f64) -> Result<ScalarEstimate> {
    let f = fold(down, noise);
    match act.pieces() {
        Some(pieces) => piecewise_map(pieces, act, &f, r_plus, gamma_plus),
        None => sigmoid_map(&f, r_plus, gamma_plus),
    }
}

/// Log of the unnormalized posterior density used by the quadrature oracles
/// in tests: `log N(x; r_plus, 1/gamma_plus) + log N(phi(x); r, v)`.
pub fn log_joint_density(act: Activation, noise: NoiseModel, down: Downstream, r_plus: f64, gamma_plus: f64, x: f64) -> f64 {
    let f = fold(down, noise);
    let prior = -0.5 * gamma_plus * (x - r_plus).powi(2) + 0.5 * gamma_plus.ln() - LN_SQRT_2PI;
    prior - 0.5 * (act.apply(x) - f.r).powi(2) / f.v - 0.5 * f.v.ln() - LN_SQRT_2PI
}
