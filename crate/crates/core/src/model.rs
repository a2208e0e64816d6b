//! Stochastic deep network description and signal generation.
//!
//! A network with `L` layers maps `z_0 ~ N(0, I)` through alternating linear
//! layers `z = W z_prev + b + xi` and separable layers `z = phi(z_prev) + xi`,
//! starting with a linear layer. The last signal `z_L` is the measurement `y`.

use crate::error::{Error, Result};
use crate::linalg::{gaussian_vector, svd_factorize, SvdFactors};
use crate::rng::{substream, Purpose, Rng};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sign,
    Sigmoid,
}

/// Linear piece `phi(x) = slope * x + offset` on `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub lo: f64,
    pub hi: f64,
    pub slope: f64,
    pub offset: f64,
}

const INF: f64 = f64::INFINITY;
const IDENTITY_PIECES: [Piece; 1] = [Piece { lo: -INF, hi: INF, slope: 1.0, offset: 0.0 }];
const RELU_PIECES: [Piece; 2] = [
    Piece { lo: -INF, hi: 0.0, slope: 0.0, offset: 0.0 },
    Piece { lo: 0.0, hi: INF, slope: 1.0, offset: 0.0 },
];
const SIGN_PIECES: [Piece; 2] = [
    Piece { lo: -INF, hi: 0.0, slope: 0.0, offset: -1.0 },
    Piece { lo: 0.0, hi: INF, slope: 0.0, offset: 1.0 },
];

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sign => {
                if x >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Activation::Sigmoid => crate::gauss::logistic(x),
        }
    }

    /// Derivative away from kinks.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sign => 0.0,
            Activation::Sigmoid => {
                let s = crate::gauss::logistic(x);
                s * (1.0 - s)
            }
        }
    }

    /// Piecewise-linear description, if the activation has one.
    pub fn pieces(self) -> Option<&'static [Piece]> {
        match self {
            Activation::Identity => Some(&IDENTITY_PIECES),
            Activation::Relu => Some(&RELU_PIECES),
            Activation::Sign => Some(&SIGN_PIECES),
            Activation::Sigmoid => None,
        }
    }

    /// Points where the activation is not smooth.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            Activation::Relu | Activation::Sign => &[0.0],
            _ => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Sign => "sign",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    None,
    Gaussian { precision: f64 },
}

impl NoiseModel {
    /// Noise precision, `None` for a deterministic layer.
    pub fn precision(self) -> Option<f64> {
        match self {
            NoiseModel::None => None,
            NoiseModel::Gaussian { precision } => Some(precision),
        }
    }
}

/// Precision of the additive noise of a linear layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Precision {
    Finite(f64),
    Noiseless,
}

impl Precision {
    pub fn finite(self) -> Option<f64> {
        match self {
            Precision::Finite(p) => Some(p),
            Precision::Noiseless => None,
        }
    }

    pub fn variance(self) -> f64 {
        match self {
            Precision::Finite(p) => 1.0 / p,
            Precision::Noiseless => 0.0,
        }
    }
}

fn check_precision(p: f64, what: &str) -> Result<()> {
    if p.is_finite() && p > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} precision must be positive and finite, got {p}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub factors: SvdFactors,
    pub bias: DVector<f64>,
    pub noise: Precision,
    bias_rot: DVector<f64>,
}

impl LinearLayer {
    pub fn from_weight(weight: &DMatrix<f64>, bias: DVector<f64>, noise: Precision) -> Result<Self> {
        Self::from_factors(svd_factorize(weight)?, bias, noise)
    }

    pub fn from_factors(factors: SvdFactors, bias: DVector<f64>, noise: Precision) -> Result<Self> {
        if bias.len() != factors.n_out() {
            return Err(Error::DimensionMismatch { what: "bias".into(), expected: factors.n_out(), found: bias.len() });
        }
        if let Precision::Finite(p) = noise {
            check_precision(p, "linear noise")?;
        }
        let bias_rot = factors.left.tr_mul(&bias);
        Ok(Self { factors, bias, noise, bias_rot })
    }

    pub fn n_in(&self) -> usize {
        self.factors.n_in()
    }

    pub fn n_out(&self) -> usize {
        self.factors.n_out()
    }

    /// Bias expressed in the left singular basis.
    pub fn bias_rotated(&self) -> &DVector<f64> {
        &self.bias_rot
    }

    pub fn mean_output(&self, x: &DVector<f64>) -> DVector<f64> {
        self.factors.apply(x) + &self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonlinearLayer {
    pub activation: Activation,
    pub noise: NoiseModel,
}

impl NonlinearLayer {
    pub fn new(activation: Activation, noise: NoiseModel) -> Result<Self> {
        if let NoiseModel::Gaussian { precision } = noise {
            check_precision(precision, "nonlinear noise")?;
        }
        Ok(Self { activation, noise })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(LinearLayer),
    Nonlinear(NonlinearLayer),
}

impl Layer {
    pub fn is_linear(&self) -> bool {
        matches!(self, Layer::Linear(_))
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            Layer::Linear(l) => l.noise == Precision::Noiseless,
            Layer::Nonlinear(n) => n.noise == NoiseModel::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

impl NetworkSpec {
    /// Builds a network; `layers[0]` maps `z_0` to `z_1`.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidDimension("network needs at least one layer".into()));
        }
        let n0 = match &layers[0] {
            Layer::Linear(l) => l.n_in(),
            Layer::Nonlinear(_) => return Err(Error::InvalidArgument("the first layer must be linear".into())),
        };
        let mut dims = vec![n0];
        for (i, layer) in layers.iter().enumerate() {
            let expect_linear = i % 2 == 0;
            if layer.is_linear() != expect_linear {
                return Err(Error::InvalidArgument(format!("layer {} breaks linear/nonlinear alternation", i + 1)));
            }
            let prev = *dims.last().unwrap();
            match layer {
                Layer::Linear(l) => {
                    if l.n_in() != prev {
                        return Err(Error::DimensionMismatch { what: format!("input of layer {}", i + 1), expected: prev, found: l.n_in() });
                    }
                    dims.push(l.n_out());
                }
                Layer::Nonlinear(_) => dims.push(prev),
            }
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDimension("all dimensions must be positive".into()));
        }
        Ok(Self { dims, layers })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer `l` in 1-based numbering, mapping `z_{l-1}` to `z_l`.
    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Replace the noise precision of the final layer, which must be linear.
    pub fn set_output_precision(&mut self, p: Precision) -> Result<()> {
        if let Precision::Finite(v) = p {
            check_precision(v, "output")?;
        }
        match self.layers.last_mut().unwrap() {
            Layer::Linear(l) => {
                l.noise = p;
                Ok(())
            }
            Layer::Nonlinear(_) => Err(Error::InvalidArgument("final layer is not linear".into())),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(s)?;
        file.into_spec()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(&NetworkFile::from_spec(self))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkFile {
    dims: Vec<usize>,
    layers: Vec<LayerFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerFile {
    Linear {
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise_precision: Option<f64>,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        noiseless: bool,
    },
    Nonlinear {
        activation: Activation,
        noise: NoiseModel,
    },
}

impl NetworkFile {
    fn from_spec(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Linear(l) => {
                    let w = l.factors.weight();
                    LayerFile::Linear {
                        weight: (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect(),
                        bias: l.bias.iter().copied().collect(),
                        noise_precision: l.noise.finite(),
                        noiseless: l.noise == Precision::Noiseless,
                    }
                }
                Layer::Nonlinear(n) => LayerFile::Nonlinear { activation: n.activation, noise: n.noise },
            })
            .collect();
        Self { dims: spec.dims.clone(), layers }
    }

    fn into_spec(self) -> Result<NetworkSpec> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, lf) in self.layers.into_iter().enumerate() {
            layers.push(match lf {
                LayerFile::Linear { weight, bias, noise_precision, noiseless } => {
                    let rows = weight.len();
                    let cols = weight.first().map_or(0, |r| r.len());
                    if rows == 0 || cols == 0 || weight.iter().any(|r| r.len() != cols) {
                        return Err(Error::InvalidDimension(format!("layer {} has a ragged or empty weight", i + 1)));
                    }
                    let w = DMatrix::from_fn(rows, cols, |r, c| weight[r][c]);
                    let noise = match (noise_precision, noiseless) {
                        (Some(p), false) => Precision::Finite(p),
                        (None, true) => Precision::Noiseless,
                        _ => return Err(Error::Config(format!("layer {} needs exactly one of noise_precision or noiseless", i + 1))),
                    };
                    Layer::Linear(LinearLayer::from_weight(&w, DVector::from_vec(bias), noise)?)
                }
                LayerFile::Nonlinear { activation, noise } => Layer::Nonlinear(NonlinearLayer::new(activation, noise)?),
            });
        }
        let spec = NetworkSpec::new(layers)?;
        if spec.dims != self.dims {
            return Err(Error::Config(format!("declared dims {:?} do not match layer shapes {:?}", self.dims, spec.dims)));
        }
        Ok(spec)
    }
}

/// Signals `z_0, ..., z_L` of one draw from the network.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSet {
    pub z: Vec<DVector<f64>>,
}

impl SignalSet {
    pub fn measurement(&self) -> &DVector<f64> {
        self.z.last().unwrap()
    }
}

fn add_noise(z: &mut DVector<f64>, precision: f64, rng: &mut Rng) {
    let sd = precision.sqrt().recip();
    for v in z.iter_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += sd * e;
    }
}

fn propagate(layer: &Layer, x: &DVector<f64>, rng: &mut Rng) -> DVector<f64> {
    match layer {
        Layer::Linear(l) => {
            let mut z = l.mean_output(x);
            if let Precision::Finite(p) = l.noise {
                add_noise(&mut z, p, rng);
            }
            z
        }
        Layer::Nonlinear(n) => {
            let mut z = x.map(|v| n.activation.apply(v));
            if let NoiseModel::Gaussian { precision } = n.noise {
                add_noise(&mut z, precision, rng);
            }
            z
        }
    }
}

/// Draw `z_0 ~ N(0, I)` and propagate it through every layer.
///
/// The input and each layer's noise use their own substreams of `seed`.
pub fn forward_generate(spec: &NetworkSpec, seed: u64) -> SignalSet {
    forward_generate_to(spec, seed, spec.num_layers())
}

/// Like [`forward_generate`] but stops after layer `upto`.
pub fn forward_generate_to(spec: &NetworkSpec, seed: u64, upto: usize) -> SignalSet {
    let mut z = Vec::with_capacity(upto + 1);
    z.push(gaussian_vector(spec.input_dim(), &mut substream(seed, Purpose::Signal, 0)));
    for l in 1..=upto {
        let mut rng = substream(seed, Purpose::Noise, l as u64);
        let next = propagate(spec.layer(l), &z[l - 1], &mut rng);
        z.push(next);
    }
    SignalSet { z }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePolicy {
    /// Mean of the squared singular values equals one.
    UnitMeanSquare,
    /// Largest singular value equals one.
    UnitLargest,
}

/// `min(m, n)` singular values in geometric progression with ratio
/// `cond` between the largest and the smallest.
pub fn geometric_singular_values(m: usize, n: usize, cond: f64, policy: ScalePolicy) -> Result<DVector<f64>> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidDimension("singular value count must be positive".into()));
    }
    if !(cond.is_finite() && cond >= 1.0) {
        return Err(Error::InvalidArgument(format!("condition number must be >= 1, got {cond}")));
    }
    let k = m.min(n);
    let mut s = DVector::from_fn(k, |i, _| if k == 1 { 1.0 } else { cond.powf(-(i as f64) / (k - 1) as f64) });
    let scale = match policy {
        ScalePolicy::UnitMeanSquare => (k as f64 / s.norm_squared()).sqrt(),
        ScalePolicy::UnitLargest => 1.0 / s[0],
    };
    s *= scale;
    Ok(s)
}

/// Precision of the final linear layer's noise giving the requested SNR,
/// `E||W z_{L-1} + b||^2 / E||xi||^2`, estimated from `trials` draws.
pub fn calibrate_noise_to_snr(spec: &NetworkSpec, snr_db: f64, trials: usize, seed: u64) -> Result<f64> {
    let last = match spec.layers().last().unwrap() {
        Layer::Linear(l) => l,
        Layer::Nonlinear(_) => return Err(Error::InvalidArgument("SNR calibration needs a linear final layer".into())),
    };
    if trials == 0 {
        return Err(Error::InvalidArgument("SNR calibration needs at least one trial".into()));
    }
    let depth = spec.num_layers() - 1;
    let mut power = 0.0;
    for t in 0..trials {
        let s = forward_generate_to(spec, crate::rng::trial_seed(seed ^ 0x5eed_ca11, t as u64), depth);
        power += last.mean_output(&s.z[depth]).norm_squared();
    }
    power /= trials as f64;
    if !(power > 0.0) {
        return Err(Error::DegenerateModel("measurement signal has zero power".into()));
    }
    Ok(10f64.powf(snr_db / 10.0) * last.n_out() as f64 / power)
}
