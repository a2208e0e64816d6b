//! Scalar laws that drive the state evolution.

use crate::error::{Error, Result};
use crate::model::{Activation, Layer, NetworkSpec, NoiseModel, Precision};
use serde::{Deserialize, Serialize};

/// Empirical law of a bias vector, summarized as a Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct BiasLaw {
    pub mean: f64,
    pub var: f64,
}

impl BiasLaw {
    pub fn from_values(b: &[f64]) -> Self {
        let n = b.len() as f64;
        let mean = b.iter().sum::<f64>() / n;
        let var = b.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, var }
    }

    pub fn second_moment(&self) -> f64 {
        self.mean * self.mean + self.var
    }
}

/// Per-layer law. Biases of linear layers are carried by the law of the
/// following separable layer, which sees its input shifted by them; the
/// state evolution of the linear layer itself is bias-free.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerLaw {
    Linear {
        /// Singular values, `min(n_out, n_in)` of them.
        s: Vec<f64>,
        n_out: usize,
        n_in: usize,
        noise: Precision,
        bias: BiasLaw,
    },
    Nonlinear {
        activation: Activation,
        noise: NoiseModel,
        /// Law of the bias added by the preceding linear layer.
        input_bias: BiasLaw,
    },
}

impl LayerLaw {
    pub fn dim_out(&self, dim_in: usize) -> usize {
        match self {
            LayerLaw::Linear { n_out, .. } => *n_out,
            LayerLaw::Nonlinear { .. } => dim_in,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationLaw {
    pub layers: Vec<LayerLaw>,
}

impl PerturbationLaw {
    /// Laws taken from a concrete network: its singular values, noise levels
    /// and bias statistics.
    pub fn from_network(spec: &NetworkSpec) -> Self {
        let mut layers = Vec::with_capacity(spec.num_layers());
        let mut last_bias = BiasLaw::default();
        for layer in spec.layers() {
            layers.push(match layer {
                Layer::Linear(l) => {
                    last_bias = BiasLaw::from_values(l.bias.as_slice());
                    LayerLaw::Linear { s: l.factors.s.iter().copied().collect(), n_out: l.n_out(), n_in: l.n_in(), noise: l.noise, bias: last_bias }
                }
                Layer::Nonlinear(n) => LayerLaw::Nonlinear { activation: n.activation, noise: n.noise, input_bias: last_bias },
            });
        }
        Self { layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidDimension("law needs at least one layer".into()));
        }
        let mut dim = match &self.layers[0] {
            LayerLaw::Linear { n_in, .. } => *n_in,
            LayerLaw::Nonlinear { .. } => 0,
        };
        for (i, l) in self.layers.iter().enumerate() {
            let linear = matches!(l, LayerLaw::Linear { .. });
            if linear != (i % 2 == 0) {
                return Err(Error::InvalidArgument(format!("layer {} breaks linear/nonlinear alternation", i + 1)));
            }
            if let LayerLaw::Linear { s, n_out, n_in, .. } = l {
                if s.len() != (*n_out).min(*n_in) || *n_out == 0 || *n_in == 0 {
                    return Err(Error::InvalidDimension(format!("layer {} singular values do not match its shape", i + 1)));
                }
                if *n_in != dim {
                    return Err(Error::DimensionMismatch { what: format!("input of layer {}", i + 1), expected: dim, found: *n_in });
                }
            }
            dim = l.dim_out(dim);
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}
