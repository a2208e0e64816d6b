//! Random orthogonal matrices and full singular value factorizations.

use crate::error::{Error, Result};
use crate::rng::Rng;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian_matrix(rows: usize, cols: usize, sd: f64, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let e: f64 = StandardNormal.sample(rng);
        sd * e
    })
}

pub fn gaussian_vector(n: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn haar_orthogonal(n: usize, rng: &mut Rng) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::InvalidDimension("haar_orthogonal needs n >= 1".into()));
    }
    let g = gaussian_matrix(n, n, 1.0, rng);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Extend the orthonormal columns of `thin` (m x k) to an m x m orthogonal
/// matrix whose first k columns are exactly `thin`.
pub fn complete_orthonormal(thin: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, k) = thin.shape();
    if k == m {
        return thin.clone();
    }
    let qr = thin.clone().qr();
    let mut qt = DMatrix::<f64>::identity(m, m);
    qr.q_tr_mul(&mut qt);
    let mut full = qt.transpose();
    full.columns_mut(0, k).copy_from(thin);
    full
}

/// `W = left * diag(s) * right` with `left` (n_out x n_out) and `right`
/// (n_in x n_in) orthogonal and `s` of length `min(n_out, n_in)`, sorted
/// in decreasing order. Rows of `right` are the right singular vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub left: DMatrix<f64>,
    pub s: DVector<f64>,
    pub right: DMatrix<f64>,
}

impl SvdFactors {
    pub fn new(left: DMatrix<f64>, s: DVector<f64>, right: DMatrix<f64>) -> Result<Self> {
        if !left.is_square() || !right.is_square() {
            return Err(Error::InvalidDimension("singular vector matrices must be square".into()));
        }
        let k = left.nrows().min(right.nrows());
        if s.len() != k {
            return Err(Error::DimensionMismatch { what: "singular values".into(), expected: k, found: s.len() });
        }
        if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("singular values must be finite and nonnegative".into()));
        }
        Ok(Self { left, s, right })
    }

    pub fn n_out(&self) -> usize {
        self.left.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.right.nrows()
    }

    /// Singular value of component `j`, zero for padded components.
    pub fn sv(&self, j: usize) -> f64 {
        if j < self.s.len() {
            self.s[j]
        } else {
            0.0
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = &self.right * x;
        let mut q = DVector::zeros(self.n_out());
        for j in 0..self.s.len() {
            q[j] = self.s[j] * p[j];
        }
        &self.left * q
    }

    pub fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        let q = self.left.tr_mul(y);
        let mut p = DVector::zeros(self.n_in());
        for j in 0..self.s.len() {
            p[j] = self.s[j] * q[j];
        }
        self.right.tr_mul(&p)
    }

    pub fn weight(&self) -> DMatrix<f64> {
        let k = self.s.len();
        let mut scaled = self.left.columns(0, k).into_owned();
        for j in 0..k {
            scaled.column_mut(j).scale_mut(self.s[j]);
        }
        scaled * self.right.rows(0, k)
    }
}

/// Full SVD with orthogonal complements for the zero-padded directions.
pub fn svd_factorize(w: &DMatrix<f64>) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return Err(Error::InvalidDimension("weight matrix must be non-empty".into()));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("weight matrix contains non-finite entries".into()));
    }
    let svd = w.clone().try_svd(true, true, f64::EPSILON, 10_000).ok_or_else(|| Error::NumericFailure("SVD did not converge".into()))?;
    let u = svd.u.ok_or_else(|| Error::NumericFailure("SVD returned no left vectors".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::NumericFailure("SVD returned no right vectors".into()))?;
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = DVector::from_iterator(k, order.iter().map(|&i| svd.singular_values[i]));
    let u_sorted = DMatrix::from_fn(m, k, |r, c| u[(r, order[c])]);
    let v_sorted = DMatrix::from_fn(n, k, |r, c| vt[(order[c], r)]);
    let left = complete_orthonormal(&u_sorted);
    let right = complete_orthonormal(&v_sorted).transpose();
    SvdFactors::new(left, s, right)
}

/// Singular values of an `rows x cols` matrix with i.i.d. `N(0, var)` entries,
/// in decreasing order.
pub fn gaussian_singular_values(rows: usize, cols: usize, var: f64, rng: &mut Rng) -> DVector<f64> {
    let (a, b) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let g = gaussian_matrix(a, b, var.sqrt(), rng);
    let gram = &g * g.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut s: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    s.sort_by(|x, y| y.total_cmp(x));
    DVector::from_vec(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Purpose};

    fn orth_err(q: &DMatrix<f64>) -> f64 {
        let n = q.nrows();
        (q.transpose() * q - DMatrix::<f64>::identity(n, n)).abs().max()
    }

    #[test]
    fn haar_is_orthogonal() {
        let mut rng = substream(1, Purpose::Weights, 0);
        for n in [1, 2, 7, 40] {
            let q = haar_orthogonal(n, &mut rng).unwrap();
            assert!(orth_err(&q) < 1e-12);
        }
        let q = haar_orthogonal(1, &mut rng).unwrap();
        assert!((q[(0, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn haar_sign_mean_is_near_zero() {
        let mut rng = substream(2, Purpose::Weights, 0);
        let n = 4;
        let trials = 4000;
        let mut acc = DMatrix::<f64>::zeros(n, n);
        for _ in 0..trials {
            acc += haar_orthogonal(n, &mut rng).unwrap();
        }
        acc /= trials as f64;
        // entries have variance 1/n, so the mean of 4000 draws sits within ~0.04
        assert!(acc.abs().max() < 0.04, "{acc}");
    }

    #[test]
    fn svd_reconstructs_rectangular_weights() {
        let mut rng = substream(3, Purpose::Weights, 0);
        for (m, n) in [(5, 3), (3, 5), (4, 4), (1, 6)] {
            let w = gaussian_matrix(m, n, 1.0, &mut rng);
            let f = svd_factorize(&w).unwrap();
            assert!((f.weight() - &w).abs().max() < 1e-12);
            assert!(orth_err(&f.left) < 1e-12);
            assert!(orth_err(&f.right) < 1e-12);
            for j in 1..f.s.len() {
                assert!(f.s[j - 1] >= f.s[j]);
            }
            let x = gaussian_vector(n, &mut rng);
            assert!((f.apply(&x) - &w * &x).abs().max() < 1e-12);
            let y = gaussian_vector(m, &mut rng);
            assert!((f.apply_transpose(&y) - w.transpose() * &y).abs().max() < 1e-12);
        }
    }

    #[test]
    fn zero_matrix_factorizes() {
        let w = DMatrix::<f64>::zeros(3, 2);
        let f = svd_factorize(&w).unwrap();
        assert!(f.s.iter().all(|&v| v == 0.0));
        assert!(orth_err(&f.left) < 1e-12);
    }

    #[test]
    fn gaussian_singular_values_have_expected_scale() {
        let mut rng = substream(4, Purpose::Weights, 0);
        let s = gaussian_singular_values(200, 100, 1.0 / 100.0, &mut rng);
        assert_eq!(s.len(), 100);
        // mean square singular value equals rows * var = 2
        let ms = s.iter().map(|v| v * v).sum::<f64>() / 100.0;
        assert!((ms - 2.0).abs() < 0.1);
    }
}
