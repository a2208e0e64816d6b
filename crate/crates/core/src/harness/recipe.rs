//! Random synthetic networks: a relu generative prior followed by a
//! compressive linear measurement with prescribed conditioning.

use crate::error::{Error, Result};
use crate::linalg::{gaussian_singular_values, gaussian_vector, haar_orthogonal, SvdFactors};
use crate::model::{calibrate_noise_to_snr, geometric_singular_values, Activation, Layer, LinearLayer, NetworkSpec, NoiseModel, NonlinearLayer, Precision, ScalePolicy};
use crate::rng::{substream, trial_seed, Purpose};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipe {
    /// Widths `N_0, ..., N_{2K}` of the prior: each linear layer maps
    /// `N_{2k} -> N_{2k+1}` and each relu keeps `N_{2k+1} = N_{2k+2}`.
    pub dims: Vec<usize>,
    /// Number of measurements `M`.
    pub measurements: usize,
    /// Fraction of positive pre-activations in every hidden layer.
    pub rho: f64,
    /// Ratio of the largest to the smallest measurement singular value.
    pub kappa: f64,
    pub snr_db: f64,
    /// Standard deviation of the i.i.d. part of the hidden biases.
    pub bias_sd: f64,
    /// Noise precision of the hidden linear layers; deterministic if absent.
    pub hidden_precision: Option<f64>,
    /// Network draws used to place the bias means and calibrate the SNR.
    pub calibration_draws: usize,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            dims: vec![20, 100, 100, 500, 500, 784, 784],
            measurements: 100,
            rho: 0.4,
            kappa: 10.0,
            snr_db: 30.0,
            bias_sd: 1.0,
            hidden_precision: None,
            calibration_draws: 200,
        }
    }
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() % 2 == 0 || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("dims must list an odd number of positive widths".into()));
        }
        if self.dims[1..].chunks(2).any(|c| c[0] != c[1]) {
            return Err(Error::Config("relu layers must keep the width of the preceding linear layer".into()));
        }
        if self.measurements == 0 {
            return Err(Error::Config("need at least one measurement".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config("rho must lie in (0, 1)".into()));
        }
        if !(self.kappa >= 1.0 && self.kappa.is_finite()) {
            return Err(Error::Config("kappa must be at least 1".into()));
        }
        if !self.snr_db.is_finite() || !(self.bias_sd >= 0.0) {
            return Err(Error::Config("snr_db must be finite and bias_sd nonnegative".into()));
        }
        if let Some(p) = self.hidden_precision {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Config("hidden_precision must be positive".into()));
            }
        }
        if self.calibration_draws == 0 {
            return Err(Error::Config("calibration_draws must be positive".into()));
        }
        Ok(())
    }

    /// The relu prior alone, without the measurement layer.
    pub fn build_prior(&self, seed: u64) -> Result<Vec<Layer>> {
        self.validate()?;
        let noise = self.hidden_precision.map_or(Precision::Noiseless, Precision::Finite);
        let draws = self.calibration_draws;
        let mut cal: Vec<DVector<f64>> = (0..draws).map(|t| gaussian_vector(self.dims[0], &mut substream(seed, Purpose::Calibration, t as u64))).collect();
        let mut layers = Vec::new();
        for (k, w) in self.dims.windows(2).step_by(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let idx = 2 * k as u64 + 1;
            let mut rng = substream(seed, Purpose::Weights, idx);
            // i.i.d. N(0, 1/n_in) weights, drawn through their singular value law
            let left = haar_orthogonal(n_out, &mut rng)?;
            let right = haar_orthogonal(n_in, &mut rng)?;
            let s = gaussian_singular_values(n_out, n_in, 1.0 / n_in as f64, &mut rng);
            let factors = SvdFactors::new(left, s, right)?;
            let raw = gaussian_vector(n_out, &mut substream(seed, Purpose::Bias, idx)) * self.bias_sd;
            // shift the bias so that a fraction rho of the pre-activations is positive
            let mut pre: Vec<f64> = cal.iter().flat_map(|z| (factors.apply(z) + &raw).data.as_vec().clone()).collect();
            pre.sort_by(f64::total_cmp);
            let q = quantile_sorted(&pre, 1.0 - self.rho);
            let bias = raw.add_scalar(-q);
            let lin = LinearLayer::from_factors(factors, bias, noise)?;
            let relu = NonlinearLayer::new(Activation::Relu, NoiseModel::None)?;
            let mut nrng = substream(seed, Purpose::Calibration, (1 << 32) + idx);
            cal = cal
                .iter()
                .map(|z| {
                    let mut u = lin.mean_output(z);
                    if let Precision::Finite(p) = noise {
                        u += gaussian_vector(n_out, &mut nrng) / p.sqrt();
                    }
                    u.map(|v| relu.activation.apply(v))
                })
                .collect();
            layers.push(Layer::Linear(lin));
            layers.push(Layer::Nonlinear(relu));
        }
        Ok(layers)
    }

    /// Measurement layer `y = U diag(s) V^T z + xi` for the given prior.
    pub fn attach_measurement(&self, prior: &[Layer], seed: u64) -> Result<NetworkSpec> {
        let n = *self.dims.last().expect("validated");
        let m = self.measurements;
        let mut rng = substream(seed, Purpose::Measurement, m as u64);
        let left = haar_orthogonal(m, &mut rng)?;
        let right = haar_orthogonal(n, &mut rng)?;
        let s = geometric_singular_values(m, n, self.kappa, ScalePolicy::UnitMeanSquare)?;
        let factors = SvdFactors::new(left, s, right)?;
        let meas = LinearLayer::from_factors(factors, DVector::zeros(m), Precision::Finite(1.0))?;
        let mut layers = prior.to_vec();
        layers.push(Layer::Linear(meas));
        let mut spec = NetworkSpec::new(layers)?;
        let p = calibrate_noise_to_snr(&spec, self.snr_db, self.calibration_draws, trial_seed(seed, m as u64))?;
        spec.set_output_precision(Precision::Finite(p))?;
        Ok(spec)
    }

    pub fn build(&self, seed: u64) -> Result<NetworkSpec> {
        let prior = self.build_prior(seed)?;
        self.attach_measurement(&prior, seed)
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
