//! Expectations of one estimation step under the state-evolution law.
//!
//! Every step estimates a target `T` from an input whose error with respect
//! to `T` is `C`, producing `h` with average sensitivity `d`. The second
//! moments below are all the recursion needs to form the law of the next
//! extrinsic error `(h - T - alpha C) / (1 - alpha)`.

use crate::denoisers::{linear_coefs, observed_coefs, scalar_estimate, Downstream, Mode};
use crate::model::{Activation, NoiseModel, NonlinearLayer, Precision};
use crate::quadrature::{split_normal_rule, QuadratureRule};
use crate::rng::{substream, Purpose};
use crate::state_evolution::law::BiasLaw;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMoments {
    pub d: f64,
    /// `E (h - T)^2`
    pub ee: f64,
    /// `E (h - T) C`
    pub ec: f64,
    /// `E C^2`
    pub cc: f64,
    /// `E T (h - T)`
    pub te: f64,
    /// `E T C`
    pub tc: f64,
    /// `E T^2`
    pub tt: f64,
    /// `E (h - T) b`, with `b` the bias of the signal's layer.
    pub eb: f64,
    /// `E C b`
    pub cb: f64,
    /// `E b^2`
    pub bb: f64,
}

/// Law of the extrinsic error `N` handed to the neighboring step, split as
/// `N = load * b + G` with `G` uncorrelated with the bias `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsic {
    /// `E T^2`
    pub tt: f64,
    /// `E T G`
    pub tg: f64,
    /// `E G^2`
    pub gg: f64,
    pub load: f64,
}

impl StepMoments {
    fn add(&mut self, w: f64, o: &StepMoments) {
        self.d += w * o.d;
        self.ee += w * o.ee;
        self.ec += w * o.ec;
        self.cc += w * o.cc;
        self.te += w * o.te;
        self.tc += w * o.tc;
        self.tt += w * o.tt;
        self.eb += w * o.eb;
        self.cb += w * o.cb;
        self.bb += w * o.bb;
    }

    fn scaled(mut self, w: f64) -> Self {
        let o = self;
        self = StepMoments::default();
        self.add(w, &o);
        self
    }

    /// Law of the new extrinsic error `N = (h - T - alpha C) / (1 - alpha)`.
    pub fn extrinsic(&self, alpha: f64) -> Extrinsic {
        let g = 1.0 - alpha;
        let nn = (self.ee - 2.0 * alpha * self.ec + alpha * alpha * self.cc) / g / g;
        let load = if self.bb > 0.0 { (self.eb - alpha * self.cb) / g / self.bb } else { 0.0 };
        Extrinsic { tt: self.tt, tg: (self.te - alpha * self.tc) / g, gg: (nn - load * load * self.bb).max(0.0), load }
    }
}

/// Law of the error of the downstream message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MinusLaw {
    /// The message is identically zero (the initial condition).
    Zero,
    /// Independent Gaussian error with this variance.
    Gaussian(f64),
}

/// Law of the true layer input and the error of the upstream message:
/// raw second moments `(E P0^2, E P0 G, E G^2)` of the bias-free input and
/// the bias-free part of the error, plus the error's loading on the bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputLaw {
    pub k: [f64; 3],
    pub load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpectationMethod {
    Quadrature { hermite: usize, legendre: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for ExpectationMethod {
    fn default() -> Self {
        ExpectationMethod::Quadrature { hermite: 20, legendre: 40 }
    }
}

/// Quadratic forms over the independent Gaussian basis
/// `(P0, P+, noise, C, bias)` used by linear steps.
struct Basis {
    k: [f64; 3],
    noise: f64,
    tau: f64,
    bias: f64,
}

type Coef = [f64; 5];

impl Basis {
    fn q(&self, a: &Coef, b: &Coef) -> f64 {
        a[0] * b[0] * self.k[0] + (a[0] * b[1] + a[1] * b[0]) * self.k[1] + a[1] * b[1] * self.k[2] + a[2] * b[2] * self.noise + a[3] * b[3] * self.tau + a[4] * b[4] * self.bias
    }

    fn moments(&self, d: f64, h: &Coef, t: &Coef, c: &Coef) -> StepMoments {
        let e: Coef = std::array::from_fn(|i| h[i] - t[i]);
        StepMoments {
            d,
            ee: self.q(&e, &e),
            ec: self.q(&e, c),
            cc: self.q(c, c),
            te: self.q(t, &e),
            tc: self.q(t, c),
            tt: self.q(t, t),
            eb: self.q(&e, &E4),
            cb: self.q(c, &E4),
            bb: self.bias,
        }
    }
}

fn lin(a: f64, x: &Coef, b: f64, y: &Coef) -> Coef {
    std::array::from_fn(|i| a * x[i] + b * y[i])
}

const E0: Coef = [1.0, 0.0, 0.0, 0.0, 0.0];
const E1: Coef = [0.0, 1.0, 0.0, 0.0, 0.0];
const E2: Coef = [0.0, 0.0, 1.0, 0.0, 0.0];
const E3: Coef = [0.0, 0.0, 0.0, 1.0, 0.0];
const E4: Coef = [0.0, 0.0, 0.0, 0.0, 1.0];
const ZERO: Coef = [0.0; 5];

/// Forward step of the standard normal input estimator.
pub fn input_forward(minus: MinusLaw, gamma_minus: f64) -> StepMoments {
    let a = gamma_minus / (gamma_minus + 1.0);
    let (tau, c, h) = match minus {
        MinusLaw::Zero => (0.0, lin(-1.0, &E0, 0.0, &ZERO), ZERO),
        MinusLaw::Gaussian(t) => (t, E3, lin(a, &E0, a, &E3)),
    };
    let basis = Basis { k: [1.0, 0.0, 0.0], noise: 0.0, tau, bias: 0.0 };
    basis.moments(a, &h, &E0, &c)
}

/// Forward step of a linear layer. The downstream error is
/// `load_minus * b + Q` with `Q` of variance given by `minus`.
#[allow(clippy::too_many_arguments)]
pub fn linear_forward(
    s: &[f64],
    n_out: usize,
    n_in: usize,
    noise: Precision,
    bias_sq: f64,
    input: &InputLaw,
    minus: MinusLaw,
    load_minus: f64,
    gamma_minus: f64,
    gamma_plus: f64,
) -> StepMoments {
    let tau = match minus {
        MinusLaw::Zero => 0.0,
        MinusLaw::Gaussian(t) => t,
    };
    let basis = Basis { k: input.k, noise: noise.variance(), tau, bias: bias_sq };
    let u_in = lin(1.0, &E0, 1.0, &E1);
    let mut acc = StepMoments::default();
    for j in 0..n_out {
        let sv = s.get(j).copied().unwrap_or(0.0);
        let cf = linear_coefs(sv, noise, gamma_minus, gamma_plus);
        let t = if j < n_in { lin(sv, &E0, 1.0, &E2) } else { E2 };
        let (u, c) = match minus {
            MinusLaw::Zero => {
                let u = lin(-1.0, &E4, 0.0, &ZERO);
                (u, lin(1.0, &u, -1.0, &t))
            }
            MinusLaw::Gaussian(_) => {
                let c = lin(1.0, &E3, load_minus, &E4);
                (lin(1.0, &t, 1.0, &c), c)
            }
        };
        let x = if j < n_in { u_in } else { ZERO };
        let h = lin(cf.out_u, &u, cf.out_x, &x);
        acc.add(1.0, &basis.moments(cf.out_u, &h, &t, &c));
    }
    acc.scaled(1.0 / n_out as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    s: &[f64],
    n_out: usize,
    n_in: usize,
    noise: Precision,
    bias_sq: f64,
    input: &InputLaw,
    tau_minus: f64,
    load_minus: f64,
    gamma_minus: f64,
    gamma_plus: f64,
) -> StepMoments {
    let basis = Basis { k: input.k, noise: noise.variance(), tau: tau_minus, bias: bias_sq };
    let u_in = lin(1.0, &E0, 1.0, &E1);
    let mut acc = StepMoments::default();
    for j in 0..n_in {
        let sv = s.get(j).copied().unwrap_or(0.0);
        let cf = linear_coefs(sv, noise, gamma_minus, gamma_plus);
        let u = if j < n_out { [sv, 0.0, 1.0, 1.0, load_minus] } else { ZERO };
        let h = lin(cf.in_u, &u, cf.in_x, &u_in);
        acc.add(1.0, &basis.moments(cf.in_x, &h, &E0, &E1));
    }
    // the input signal carries no bias
    StepMoments { eb: 0.0, cb: 0.0, bb: 0.0, ..acc.scaled(1.0 / n_in as f64) }
}

pub fn linear_output(s: &[f64], n_out: usize, n_in: usize, noise: Precision, input: &InputLaw, gamma_plus: f64) -> StepMoments {
    let basis = Basis { k: input.k, noise: noise.variance(), tau: 0.0, bias: 0.0 };
    let u_in = lin(1.0, &E0, 1.0, &E1);
    let mut acc = StepMoments::default();
    for j in 0..n_in {
        let sv = s.get(j).copied().unwrap_or(0.0);
        let cf = observed_coefs(sv, noise, gamma_plus);
        let u = if j < n_out { [sv, 0.0, 1.0, 0.0, 0.0] } else { ZERO };
        let h = lin(cf.in_u, &u, cf.in_x, &u_in);
        acc.add(1.0, &basis.moments(cf.in_x, &h, &E0, &E1));
    }
    acc.scaled(1.0 / n_in as f64)
}

/// Joint law of the separable layer's true input `X = T + b`, the upstream
/// error `B = G + load * b` and the downstream perturbation `W`, with the
/// bias `b` drawn from its law independently of `(T, G)`.
struct PointLaw {
    mu_x: f64,
    var_x: f64,
    mu_b: f64,
    slope: f64,
    var_b: f64,
    var_w: f64,
    bias: BiasLaw,
    /// `E[b | X, B] = bias.mean + gx (X - mu_x) + gb (B - mu_b)`
    gx: f64,
    gb: f64,
    kinks: &'static [f64],
}

impl PointLaw {
    fn new(input: &InputLaw, bias: BiasLaw, var_w: f64, activation: Activation) -> Self {
        let [k0, k1, k2] = input.k;
        let c = input.load;
        let s2 = bias.var;
        let var_x = (k0 + s2).max(1e-300);
        let cov = k1 + c * s2;
        let vbb = k2 + c * c * s2;
        let slope = cov / var_x;
        let var_b = (vbb - cov * slope).max(0.0);
        let (gx, gb) = if s2 == 0.0 {
            (0.0, 0.0)
        } else if var_b > 1e-12 * vbb.max(1e-300) {
            let det = var_x * vbb - cov * cov;
            ((s2 * vbb - c * s2 * cov) / det, (c * s2 * var_x - s2 * cov) / det)
        } else {
            (s2 / var_x, 0.0)
        };
        Self { mu_x: bias.mean, var_x, mu_b: c * bias.mean, slope, var_b, var_w, bias, gx, gb, kinks: activation.kinks() }
    }

    fn bias_given(&self, x: f64, b: f64) -> f64 {
        self.bias.mean + self.gx * (x - self.mu_x) + self.gb * (b - self.mu_b)
    }

    /// Calls `f(weight, x, b, w)` over quadrature nodes or samples.
    fn visit<F: FnMut(f64, f64, f64, f64)>(&self, method: &ExpectationMethod, use_w: bool, mut f: F) {
        match *method {
            ExpectationMethod::Quadrature { hermite, legendre } => {
                let gh = QuadratureRule::gauss_hermite(hermite);
                let xr = if self.kinks.is_empty() {
                    let r = QuadratureRule::gauss_hermite(legendre.max(hermite));
                    QuadratureRule { nodes: r.nodes.iter().map(|t| self.mu_x + self.var_x.sqrt() * t).collect(), weights: r.weights }
                } else {
                    split_normal_rule(self.mu_x, self.var_x, self.kinks, &QuadratureRule::gauss_legendre(legendre), 10.0)
                };
                let sb = self.var_b.sqrt();
                let sw = self.var_w.sqrt();
                let single = QuadratureRule { nodes: vec![0.0], weights: vec![1.0] };
                let br = if sb > 0.0 { &gh } else { &single };
                let wr = if use_w && sw > 0.0 { &gh } else { &single };
                for (x, wx) in xr.nodes.iter().zip(&xr.weights) {
                    let bm = self.mu_b + self.slope * (x - self.mu_x);
                    for (tb, wb) in br.nodes.iter().zip(&br.weights) {
                        let b = bm + sb * tb;
                        for (tw, ww) in wr.nodes.iter().zip(&wr.weights) {
                            f(wx * wb * ww, *x, b, sw * tw);
                        }
                    }
                }
            }
            ExpectationMethod::MonteCarlo { samples, seed } => {
                let mut rng = substream(seed, Purpose::Expectation, 0);
                let w = 1.0 / samples as f64;
                for _ in 0..samples {
                    let (g1, g2, g3): (f64, f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                    let x = self.mu_x + self.var_x.sqrt() * g1;
                    let b = self.mu_b + self.slope * (x - self.mu_x) + self.var_b.sqrt() * g2;
                    let ww = if use_w { self.var_w.sqrt() * g3 } else { 0.0 };
                    f(w, x, b, ww);
                }
            }
        }
    }
}

fn noise_var(noise: NoiseModel) -> f64 {
    noise.precision().map_or(0.0, |p| 1.0 / p)
}

/// Second moment of the separable layer's output `phi(X) + xi`.
pub fn nonlinear_second_moment(layer: &NonlinearLayer, tau_in: f64, bias: BiasLaw, method: &ExpectationMethod) -> f64 {
    let law = PointLaw::new(&InputLaw { k: [tau_in, 0.0, 0.0], load: 0.0 }, bias, 0.0, layer.activation);
    let mut acc = 0.0;
    law.visit(method, false, |w, x, _, _| acc += w * layer.activation.apply(x).powi(2));
    acc + noise_var(layer.noise)
}

#[allow(clippy::too_many_arguments)]
pub fn nonlinear_forward(
    mode: Mode,
    layer: &NonlinearLayer,
    bias: BiasLaw,
    input: &InputLaw,
    minus: MinusLaw,
    gamma_minus: f64,
    gamma_plus: f64,
    method: &ExpectationMethod,
) -> StepMoments {
    let nv = noise_var(layer.noise);
    let act = layer.activation;
    let mut acc = StepMoments::default();
    match minus {
        MinusLaw::Zero => {
            let law = PointLaw::new(input, bias, 0.0, act);
            law.visit(method, false, |w, x, b, _| {
                let phi = act.apply(x);
                let e = scalar_estimate(mode, layer, Downstream::Belief { r: 0.0, gamma: gamma_minus }, x + b, gamma_plus).expect("belief estimates are total");
                let tt = phi * phi + nv;
                let te = phi * (e.z - phi) - nv;
                acc.add(w, &StepMoments { d: e.dz, ee: (e.z - phi).powi(2) + nv, ec: -te, cc: tt, te, tc: -tt, tt, ..Default::default() });
            });
        }
        MinusLaw::Gaussian(tau) => {
            let omega = nv + tau;
            let (rho, sc) = if omega > 0.0 { (nv / omega, nv * tau / omega) } else { (0.0, 0.0) };
            let law = PointLaw::new(input, bias, omega, act);
            law.visit(method, true, |w, x, b, ww| {
                let phi = act.apply(x);
                let e = scalar_estimate(mode, layer, Downstream::Belief { r: phi + ww, gamma: gamma_minus }, x + b, gamma_plus).expect("belief estimates are total");
                let a = e.z - phi - rho * ww;
                let tb = phi + rho * ww;
                let cb = (1.0 - rho) * ww;
                acc.add(w, &StepMoments { d: e.dz, ee: a * a + sc, ec: a * cb + sc, cc: cb * cb + sc, te: tb * a - sc, tc: tb * cb - sc, tt: tb * tb + sc, ..Default::default() });
            });
        }
    }
    acc
}

fn backward_point(law: &PointLaw, w: f64, x: f64, b: f64, h: f64, d: f64, acc: &mut StepMoments) {
    let e = h - x;
    let bias = law.bias_given(x, b);
    acc.add(w, &StepMoments { d, ee: e * e, ec: e * b, cc: b * b, te: x * e, tc: x * b, tt: x * x, eb: e * bias, cb: b * bias, bb: 0.0 });
}

#[allow(clippy::too_many_arguments)]
pub fn nonlinear_backward(
    mode: Mode,
    layer: &NonlinearLayer,
    bias: BiasLaw,
    input: &InputLaw,
    tau_minus: f64,
    gamma_minus: f64,
    gamma_plus: f64,
    method: &ExpectationMethod,
) -> StepMoments {
    let act = layer.activation;
    let law = PointLaw::new(input, bias, noise_var(layer.noise) + tau_minus, act);
    let mut acc = StepMoments::default();
    law.visit(method, true, |w, x, b, ww| {
        let e = scalar_estimate(mode, layer, Downstream::Belief { r: act.apply(x) + ww, gamma: gamma_minus }, x + b, gamma_plus).expect("belief estimates are total");
        backward_point(&law, w, x, b, e.x, e.dx, &mut acc);
    });
    acc.bb = bias.second_moment();
    acc
}

pub fn nonlinear_output(mode: Mode, layer: &NonlinearLayer, bias: BiasLaw, input: &InputLaw, gamma_plus: f64, method: &ExpectationMethod) -> StepMoments {
    let act = layer.activation;
    let law = PointLaw::new(input, bias, noise_var(layer.noise), act);
    let mut acc = StepMoments::default();
    law.visit(method, true, |w, x, b, xi| {
        // observations outside the model's range have zero probability
        if let Ok(e) = scalar_estimate(mode, layer, Downstream::Observed(act.apply(x) + xi), x + b, gamma_plus) {
            backward_point(&law, w, x, b, e.x, e.dx, &mut acc);
        }
    });
    acc.bb = bias.second_moment();
    acc
}
