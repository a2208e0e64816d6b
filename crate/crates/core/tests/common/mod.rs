#![allow(dead_code)]

use mlvamp::linalg::{gaussian_matrix, gaussian_vector};
use mlvamp::model::{Activation, Layer, LinearLayer, NetworkSpec, NoiseModel, NonlinearLayer, Precision};
use mlvamp::rng::{substream, Purpose};
use nalgebra::{DMatrix, DVector};

pub fn linear(n_out: usize, n_in: usize, precision: Option<f64>, bias_sd: f64, seed: u64, index: u64) -> Layer {
    let mut rng = substream(seed, Purpose::Weights, index);
    let w = gaussian_matrix(n_out, n_in, (1.0 / n_in as f64).sqrt(), &mut rng);
    let b = gaussian_vector(n_out, &mut rng) * bias_sd;
    let noise = precision.map_or(Precision::Noiseless, Precision::Finite);
    Layer::Linear(LinearLayer::from_weight(&w, b, noise).unwrap())
}

pub fn nonlinear(act: Activation, precision: Option<f64>) -> Layer {
    let noise = precision.map_or(NoiseModel::None, |p| NoiseModel::Gaussian { precision: p });
    Layer::Nonlinear(NonlinearLayer::new(act, noise).unwrap())
}

/// Linear - noisy identity - linear network with unit noise precisions.
pub fn gaussian_network(dims: [usize; 3], seed: u64) -> NetworkSpec {
    let [n0, n1, n3] = dims;
    NetworkSpec::new(vec![
        linear(n1, n0, Some(1.0), 0.5, seed, 1),
        nonlinear(Activation::Identity, Some(1.0)),
        linear(n3, n1, Some(1.0), 0.5, seed, 3),
    ])
    .unwrap()
}

/// Linear/relu network with noisy linear layers and a noisy linear output.
pub fn relu_network(dims: &[usize], precision: f64, seed: u64) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut idx = 0;
    for w in dims.windows(2) {
        idx += 1;
        layers.push(linear(w[1], w[0], Some(precision), 0.3, seed, idx));
        if idx < dims.len() as u64 - 1 {
            layers.push(nonlinear(Activation::Relu, None));
        }
    }
    NetworkSpec::new(layers).unwrap()
}

/// Exact posterior of a network whose layers are all linear-Gaussian
/// (noisy linear layers and noisy identity layers): per-signal means and
/// average posterior variances of `z_0, ..., z_{L-1}`.
pub fn exact_gaussian_posterior(spec: &NetworkSpec, y: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<f64>) {
    let big_l = spec.num_layers();
    let dims = spec.dims();
    let offs: Vec<usize> = (0..big_l).scan(0, |acc, l| {
        let o = *acc;
        *acc += dims[l];
        Some(o)
    }).collect();
    let n: usize = dims[..big_l].iter().sum();
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut h = DVector::<f64>::zeros(n);
    for i in 0..dims[0] {
        p[(i, i)] += 1.0;
    }
    for l in 1..=big_l {
        // term nu/2 ||z_l - A z_{l-1} - c||^2
        let (a, c, nu) = match spec.layer(l) {
            Layer::Linear(lin) => (lin.factors.weight(), lin.bias.clone(), lin.noise.finite().unwrap()),
            Layer::Nonlinear(nl) => {
                assert_eq!(nl.activation, Activation::Identity);
                (DMatrix::identity(dims[l], dims[l]), DVector::zeros(dims[l]), nl.noise.precision().unwrap())
            }
        };
        let (pi, po) = (offs[l - 1], if l < big_l { Some(offs[l]) } else { None });
        let ata = a.transpose() * &a * nu;
        p.view_mut((pi, pi), (dims[l - 1], dims[l - 1])).iter_mut().zip(ata.iter()).for_each(|(x, v)| *x += v);
        match po {
            Some(po) => {
                for i in 0..dims[l] {
                    p[(po + i, po + i)] += nu;
                }
                let cross = -&a * nu;
                for r in 0..dims[l] {
                    for cc in 0..dims[l - 1] {
                        p[(po + r, pi + cc)] += cross[(r, cc)];
                        p[(pi + cc, po + r)] += cross[(r, cc)];
                    }
                }
                for i in 0..dims[l] {
                    h[po + i] += nu * c[i];
                }
                let atc = a.transpose() * &c * nu;
                for i in 0..dims[l - 1] {
                    h[pi + i] -= atc[i];
                }
            }
            None => {
                let aty = a.transpose() * (y - &c) * nu;
                for i in 0..dims[l - 1] {
                    h[pi + i] += aty[i];
                }
            }
        }
    }
    let chol = p.cholesky().expect("posterior precision is positive definite");
    let mean = chol.solve(&h);
    let cov = chol.inverse();
    let means = (0..big_l).map(|l| mean.rows(offs[l], dims[l]).into_owned()).collect();
    let vars = (0..big_l)
        .map(|l| (0..dims[l]).map(|i| cov[(offs[l] + i, offs[l] + i)]).sum::<f64>() / dims[l] as f64)
        .collect();
    (means, vars)
}

/// Posterior moments of `x` and `z` by trapezoid integration in the
/// standardized prior coordinate.
pub fn oracle(act: Activation, noise: NoiseModel, r: f64, gm: f64, rp: f64, gp: f64) -> (f64, f64, f64, f64) {
    let (v, kappa, extra) = match noise {
        NoiseModel::None => (1.0 / gm, 0.0, 0.0),
        NoiseModel::Gaussian { precision } => (1.0 / gm + 1.0 / precision, gm / (gm + precision), 1.0 / (gm + precision)),
    };
    let sd = gp.sqrt().recip();
    // split the range at the kink so the trapezoid rule never straddles a jump
    let kink = -rp / sd;
    let mut cuts = vec![-12.0];
    if act.kinks().len() == 1 && kink > -12.0 && kink < 12.0 {
        cuts.push(kink);
    }
    cuts.push(12.0);
    let (mut w0, mut wx, mut wxx, mut wz, mut wzz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for seg in cuts.windows(2) {
        let n = ((seg[1] - seg[0]) / 1e-4).ceil() as usize;
        let h = (seg[1] - seg[0]) / n as f64;
        for i in 0..=n {
            let t = seg[0] + i as f64 * h;
            let x = rp + sd * t;
            let inside = if i == 0 { 1e-12 } else if i == n { -1e-12 } else { 0.0 };
            let phi = act.apply(x + inside);
            let w = (-0.5 * t * t - 0.5 * (phi - r).powi(2) / v).exp() * if i == 0 || i == n { 0.5 * h } else { h };
            let mz = kappa * r + (1.0 - kappa) * phi;
            w0 += w;
            wx += w * x;
            wxx += w * x * x;
            wz += w * mz;
            wzz += w * mz * mz;
        }
    }
    let ex = wx / w0;
    let ez = wz / w0;
    (ex, wxx / w0 - ex * ex, ez, wzz / w0 - ez * ez + extra)
}
