//! Gaussian quadrature rules built by the Golub-Welsch eigenvalue method.

use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    fn from_jacobi(diag: &[f64], off: &[f64], mu0: f64) -> Self {
        let n = diag.len();
        let mut j = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            j[(i, i)] = diag[i];
            if i + 1 < n {
                j[(i, i + 1)] = off[i];
                j[(i + 1, i)] = off[i];
            }
        }
        let eig = SymmetricEigen::new(j);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| (eig.eigenvalues[k], mu0 * eig.eigenvectors[(0, k)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Nodes and weights for `E[f(Z)]`, `Z ~ N(0, 1)`. Weights sum to one.
    pub fn gauss_hermite(n: usize) -> Self {
        assert!(n >= 1, "quadrature order must be positive");
        let diag = vec![0.0; n];
        let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
        let mut rule = Self::from_jacobi(&diag, &off, 1.0);
        // symmetrize to remove eigen-solver asymmetry
        for i in 0..n / 2 {
            let k = n - 1 - i;
            let x = 0.5 * (rule.nodes[k] - rule.nodes[i]);
            let w = 0.5 * (rule.weights[k] + rule.weights[i]);
            rule.nodes[i] = -x;
            rule.nodes[k] = x;
            rule.weights[i] = w;
            rule.weights[k] = w;
        }
        if n % 2 == 1 {
            rule.nodes[n / 2] = 0.0;
        }
        let total: f64 = rule.weights.iter().sum();
        rule.weights.iter_mut().for_each(|w| *w /= total);
        rule
    }

    /// Gauss-Legendre rule on `[-1, 1]`.
    pub fn gauss_legendre(n: usize) -> Self {
        assert!(n >= 1, "quadrature order must be positive");
        let diag = vec![0.0; n];
        let off: Vec<f64> = (1..n)
            .map(|k| {
                let k = k as f64;
                k / (4.0 * k * k - 1.0).sqrt()
            })
            .collect();
        Self::from_jacobi(&diag, &off, 2.0)
    }

    /// Affine map of a `[-1, 1]` rule onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> Self {
        let h = 0.5 * (b - a);
        let c = 0.5 * (a + b);
        Self {
            nodes: self.nodes.iter().map(|x| c + h * x).collect(),
            weights: self.weights.iter().map(|w| w * h).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Rule for `E[f(X)]`, `X ~ N(mean, var)`, built from Legendre panels on
/// `mean +/- width*sd`, split at `breaks` that fall inside the range.
pub fn split_normal_rule(mean: f64, var: f64, breaks: &[f64], panel: &QuadratureRule, width: f64) -> QuadratureRule {
    let sd = var.sqrt();
    let lo = mean - width * sd;
    let hi = mean + width * sd;
    let mut cuts = vec![lo];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|&b| b > lo && b < hi).collect();
    inner.sort_by(f64::total_cmp);
    cuts.extend(inner);
    cuts.push(hi);
    let mut nodes = Vec::with_capacity(panel.len() * (cuts.len() - 1));
    let mut weights = Vec::with_capacity(nodes.capacity());
    for w in cuts.windows(2) {
        let m = panel.mapped(w[0], w[1]);
        for (x, q) in m.nodes.iter().zip(&m.weights) {
            let t = (x - mean) / sd;
            nodes.push(*x);
            weights.push(q * crate::gauss::norm_pdf(t) / sd);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    QuadratureRule { nodes, weights }
}
