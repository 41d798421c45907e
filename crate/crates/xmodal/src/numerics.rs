//! Minimal dense linear algebra and norm/clipping primitives.
//!
//! Everything here is a pure function over immutable inputs; all computation
//! is in `f64`.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "Matrix::new",
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in entries.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Largest |a_ij - a_ji| over the strict upper triangle.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "Matrix::matvec",
                expected: self.cols,
                got: v.len(),
            });
        }
        let out = self
            .data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v.iter()).map(|(a, b)| a * b).sum())
            .collect();
        Ok(out)
    }

    /// `self^T * v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::DimensionMismatch {
                context: "Matrix::matvec_t",
                expected: self.rows,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (row, vr) in self.data.chunks_exact(self.cols).zip(v.iter()) {
            for (o, a) in out.iter_mut().zip(row.iter()) {
                *o += a * vr;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                context: "Matrix::matmul",
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += aik * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Squared Mahalanobis distance `(x - y)^T S_inv (x - y)`.
///
/// `s_inv` must be the (symmetric positive definite) inverse covariance; the
/// result is clamped at zero to absorb roundoff on near-identical inputs.
pub fn mahalanobis_sq(x: &[f64], y: &[f64], s_inv: &Matrix) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "mahalanobis_sq vectors",
            expected: x.len(),
            got: y.len(),
        });
    }
    if !s_inv.is_square() || s_inv.rows() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "mahalanobis_sq metric",
            expected: x.len(),
            got: s_inv.rows(),
        });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mahalanobis_sq"));
    }
    let diff: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a - b).collect();
    let sd = s_inv.matvec(&diff)?;
    let q: f64 = diff.iter().zip(sd.iter()).map(|(a, b)| a * b).sum();
    Ok(q.max(0.0))
}

/// Gradient of `mahalanobis_sq(f, c, s_inv)` with respect to `f`:
/// `2 * S_inv * (f - c)`.
pub fn mahalanobis_sq_grad(f: &[f64], c: &[f64], s_inv: &Matrix) -> Result<Vec<f64>> {
    let diff: Vec<f64> = f.iter().zip(c.iter()).map(|(a, b)| a - b).collect();
    let mut g = s_inv.matvec(&diff)?;
    for v in &mut g {
        *v *= 2.0;
    }
    Ok(g)
}

/// Unbiased sample covariance (divide by n-1) of a list of equal-length vectors.
pub fn covariance(features: &[Vec<f64>]) -> Result<Matrix> {
    if features.len() < 2 {
        return Err(Error::InsufficientData {
            context: "covariance",
            needed: 2,
            got: features.len(),
        });
    }
    let d = features[0].len();
    for f in features {
        if f.len() != d {
            return Err(Error::DimensionMismatch {
                context: "covariance",
                expected: d,
                got: f.len(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance"));
        }
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for f in features {
                acc += (f[i] - mean[i]) * (f[j] - mean[j]);
            }
            let v = acc / (n - 1.0);
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok(cov)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::FactorizationFailed { pivot: i });
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// `(S + lambda_reg * I)^{-1}` through a Cholesky factorization.
///
/// Rejects non-symmetric input; the result is exactly symmetric by
/// construction (computed as `Linv^T Linv` with a mirrored upper triangle).
pub fn regularized_inverse(s: &Matrix, lambda_reg: f64) -> Result<Matrix> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch {
            context: "regularized_inverse",
            expected: s.rows(),
            got: s.cols(),
        });
    }
    if lambda_reg < 0.0 || !lambda_reg.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "lambda_reg must be finite and non-negative, got {lambda_reg}"
        )));
    }
    let asym = s.max_asymmetry();
    let scale = 1.0 + s.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if asym > 1e-9 * scale {
        return Err(Error::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    let n = s.rows();
    let mut a = s.clone();
    for i in 0..n {
        a.set(i, i, a.get(i, i) + lambda_reg);
    }
    let l = cholesky(&a)?;

    // Invert L by forward substitution: L * Linv = I.
    let mut linv = Matrix::zeros(n, n);
    for col in 0..n {
        for i in col..n {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                sum -= l.get(i, k) * linv.get(k, col);
            }
            linv.set(i, col, sum / l.get(i, i));
        }
    }

    // A^{-1} = Linv^T * Linv; fill the upper triangle and mirror it so the
    // output is exactly symmetric.
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in j..n {
                acc += linv.get(k, i) * linv.get(k, j);
            }
            inv.set(i, j, acc);
            inv.set(j, i, acc);
        }
    }
    Ok(inv)
}

/// Clamp every entry of `values` to `[-bound, +bound]` in place.
pub fn linf_clip(values: &mut [f64], bound: f64) {
    for v in values.iter_mut() {
        *v = v.clamp(-bound, bound);
    }
}

/// Copy of `values` with every entry clamped to `[-bound, +bound]`.
pub fn linf_clipped(values: &[f64], bound: f64) -> Vec<f64> {
    values.iter().map(|v| v.clamp(-bound, bound)).collect()
}

/// Number of strictly nonzero entries.
pub fn l0_norm(values: &[f64]) -> usize {
    values.iter().filter(|v| **v != 0.0).count()
}

pub fn l1_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v.abs()).sum()
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn linf_norm(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn euclidean_sq(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| (rng.gen::<f64>() - 0.5) * scale).collect()
    }

    #[test]
    fn mahalanobis_identity_metric_is_squared_euclidean() {
        let s_inv = Matrix::identity(2);
        let d = mahalanobis_sq(&[1.0, 0.0], &[0.0, 0.0], &s_inv).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn mahalanobis_zero_distance_to_self() {
        let s_inv = Matrix::new(2, 2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let d = mahalanobis_sq(&[3.0, 7.0], &[3.0, 7.0], &s_inv).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn mahalanobis_diagonal_covariance() {
        // S = diag(4, 1) so S_inv = diag(0.25, 1); (2, 0) vs origin gives 2^2 / 4.
        let s_inv = Matrix::diag(&[0.25, 1.0]);
        let d = mahalanobis_sq(&[2.0, 0.0], &[0.0, 0.0], &s_inv).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mahalanobis_rejects_dimension_mismatch() {
        let s_inv = Matrix::identity(2);
        assert!(mahalanobis_sq(&[1.0, 0.0, 0.0], &[0.0, 0.0], &s_inv).is_err());
        assert!(mahalanobis_sq(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0], &s_inv).is_err());
    }

    #[test]
    fn mahalanobis_rejects_non_finite() {
        let s_inv = Matrix::identity(2);
        assert!(mahalanobis_sq(&[f64::NAN, 0.0], &[0.0, 0.0], &s_inv).is_err());
    }

    #[test]
    fn covariance_single_axis_variance() {
        let cov = covariance(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(cov.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn covariance_degenerate_data_is_zero() {
        let cov = covariance(&vec![vec![1.5, -2.0]; 5]).unwrap();
        assert!(cov.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn covariance_rejects_fewer_than_two() {
        assert!(covariance(&[vec![1.0]]).is_err());
    }

    /// Brute-force two-pass covariance oracle used to pin the implementation.
    #[allow(clippy::needless_range_loop)]
    fn covariance_oracle(features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = features.len();
        let d = features[0].len();
        let mut mean = vec![0.0; d];
        for f in features {
            for j in 0..d {
                mean[j] += f[j] / n as f64;
            }
        }
        let mut out = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for f in features {
                    acc += (f[i] - mean[i]) * (f[j] - mean[j]);
                }
                out[i][j] = acc / (n - 1) as f64;
            }
        }
        out
    }

    #[test]
    fn covariance_matches_oracle_and_generator_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigmas = [3.0, 1.0, 0.5];
        // Gaussian-ish samples via sum of uniforms would skew the variance
        // check; use Box-Muller for exact diagonal targets.
        let mut samples = Vec::new();
        for _ in 0..50 {
            let mut s = Vec::new();
            for &sd in &sigmas {
                let u1: f64 = rng.gen::<f64>().max(1e-12);
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                s.push(z * sd);
            }
            samples.push(s);
        }
        let cov = covariance(&samples).unwrap();
        let oracle = covariance_oracle(&samples);
        for (i, row) in oracle.iter().enumerate() {
            for (j, want) in row.iter().enumerate() {
                assert!((cov.get(i, j) - want).abs() < 1e-12);
            }
        }
        // Sampling error of a variance estimate is ~ sigma^2 * sqrt(2/(n-1)).
        for (i, &sd) in sigmas.iter().enumerate() {
            let var = sd * sd;
            let tol = 4.0 * var * (2.0 / 49.0_f64).sqrt();
            assert!(
                (cov.get(i, i) - var).abs() < tol,
                "diag {i}: {} vs {var}",
                cov.get(i, i)
            );
        }
    }

    #[test]
    fn regularized_inverse_of_identity() {
        let inv = regularized_inverse(&Matrix::identity(3), 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((inv.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn regularized_inverse_pure_regularizer() {
        let inv = regularized_inverse(&Matrix::zeros(2, 2), 0.5).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 2.0 } else { 0.0 };
                assert!((inv.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn regularized_inverse_multiply_back_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Random PSD 5x5 via B^T B.
        let b = Matrix::new(5, 5, random_vec(&mut rng, 25, 2.0)).unwrap();
        let mut s = Matrix::zeros(5, 5);
        for i in 0..5 {
            for j in i..5 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += b.get(k, i) * b.get(k, j);
                }
                s.set(i, j, acc);
                s.set(j, i, acc);
            }
        }
        let lambda = 1e-3;
        let inv = regularized_inverse(&s, lambda).unwrap();
        let mut reg = s.clone();
        for i in 0..5 {
            reg.set(i, i, reg.get(i, i) + lambda);
        }
        let prod = inv.matmul(&reg).unwrap();
        let mut err = Matrix::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                err.set(i, j, prod.get(i, j) - want);
            }
        }
        assert!(err.frobenius_norm() < 1e-9, "{}", err.frobenius_norm());
        assert_eq!(inv.max_asymmetry(), 0.0);
    }

    #[test]
    fn regularized_inverse_rejects_asymmetric() {
        let s = Matrix::new(2, 2, vec![1.0, 0.3, 0.0, 1.0]).unwrap();
        assert!(matches!(
            regularized_inverse(&s, 0.1),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn regularized_inverse_rejects_indefinite_without_enough_ridge() {
        let s = Matrix::new(2, 2, vec![-5.0, 0.0, 0.0, -5.0]).unwrap();
        assert!(matches!(
            regularized_inverse(&s, 0.1),
            Err(Error::FactorizationFailed { .. })
        ));
    }

    #[test]
    fn clip_clamps_endpoints_only() {
        let mut v = [-10.0, 3.0, 9.0];
        linf_clip(&mut v, 8.0);
        assert_eq!(v, [-8.0, 3.0, 8.0]);

        let mut z = [0.0; 4];
        linf_clip(&mut z, 8.0);
        assert_eq!(z, [0.0; 4]);

        let mut b = [8.0];
        linf_clip(&mut b, 8.0);
        assert_eq!(b, [8.0]);
    }

    #[test]
    fn norms_on_small_vectors() {
        let v = [0.0, -1.0, 0.0, 1.0];
        assert_eq!(l0_norm(&v), 2);
        assert!((l2_norm(&v) - 2.0_f64.sqrt()).abs() < 1e-15);
        assert_eq!(l1_norm(&v), 2.0);

        let z = [0.0; 3];
        assert_eq!(l0_norm(&z), 0);
        assert_eq!(l1_norm(&z), 0.0);
        assert_eq!(l2_norm(&z), 0.0);
    }

    #[test]
    fn norms_match_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..100)
            .map(|_| {
                if rng.gen::<f64>() < 0.2 {
                    0.0
                } else {
                    (rng.gen::<f64>() - 0.5) * 10.0
                }
            })
            .collect();
        let mut n0 = 0usize;
        let mut n1 = 0.0;
        let mut n2 = 0.0;
        for &x in &v {
            if x != 0.0 {
                n0 += 1;
            }
            n1 += x.abs();
            n2 += x * x;
        }
        assert_eq!(l0_norm(&v), n0);
        assert_eq!(l1_norm(&v), n1);
        assert_eq!(l2_norm(&v), n2.sqrt());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_mahalanobis_self_is_zero(v in proptest::collection::vec(-1e3_f64..1e3, 1..8)) {
            let s_inv = Matrix::identity(v.len());
            prop_assert_eq!(mahalanobis_sq(&v, &v, &s_inv).unwrap(), 0.0);
        }

        #[test]
        fn prop_mahalanobis_identity_equals_sq_euclidean(
            x in proptest::collection::vec(-100.0_f64..100.0, 4),
            y in proptest::collection::vec(-100.0_f64..100.0, 4),
        ) {
            let s_inv = Matrix::identity(4);
            let d = mahalanobis_sq(&x, &y, &s_inv).unwrap();
            prop_assert!((d - euclidean_sq(&x, &y)).abs() < 1e-12);
        }

        #[test]
        fn prop_mahalanobis_symmetric(
            x in proptest::collection::vec(-100.0_f64..100.0, 3),
            y in proptest::collection::vec(-100.0_f64..100.0, 3),
            diag in proptest::collection::vec(0.1_f64..4.0, 3),
        ) {
            let s_inv = Matrix::diag(&diag);
            let a = mahalanobis_sq(&x, &y, &s_inv).unwrap();
            let b = mahalanobis_sq(&y, &x, &s_inv).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn prop_clip_idempotent(
            v in proptest::collection::vec(-50.0_f64..50.0, 0..32),
            bound in 0.01_f64..20.0,
        ) {
            let once = linf_clipped(&v, bound);
            let twice = linf_clipped(&once, bound);
            prop_assert_eq!(once, twice);
        }
    }
}
