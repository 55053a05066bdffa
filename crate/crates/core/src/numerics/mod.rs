//! Dense linear algebra, seeded randomness and Gaussian sampling.

mod matrix;
mod rng;

pub use matrix::{dot, euclidean_distance, Matrix};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Diagonal jitters tried, in order, when a plain Cholesky factorization fails.
pub const JITTER_LADDER: [f64; 4] = [1e-10, 1e-8, 1e-6, 1e-4];

const SYMMETRY_TOL: f64 = 1e-9;

/// Numerically stable softmax. Panics on an empty slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    assert!(!logits.is_empty(), "softmax of an empty vector");
    assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// `log Σ exp(z)`, computed with the max shifted out.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    assert!(!logits.is_empty(), "log_sum_exp of an empty vector");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Lower-triangular factor `L` with `L·Lᵀ ≈ m + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    pub factor: Matrix,
    /// Diagonal jitter that had to be added; `0.0` when the plain factorization succeeded.
    pub jitter: f64,
}

/// Cholesky factorization for symmetric positive semi-definite matrices.
///
/// Exactly-zero pivots with a vanishing remainder column are accepted (the
/// factor gets a zero column), so singular PSD inputs such as the zero matrix
/// factor without jitter. Anything else that fails is retried with
/// [`JITTER_LADDER`] added to the diagonal.
pub fn cholesky_psd(m: &Matrix) -> Result<Cholesky> {
    if !m.is_square() {
        return Err(Error::contract(format!(
            "cholesky of non-square {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let scale = m.diagonal().iter().fold(1.0f64, |a, &d| a.max(d.abs()));
    if !m.is_symmetric(SYMMETRY_TOL * scale) {
        return Err(Error::contract("cholesky input is not symmetric"));
    }
    if let Some(factor) = try_cholesky(m, 0.0) {
        return Ok(Cholesky { factor, jitter: 0.0 });
    }
    for &eps in &JITTER_LADDER {
        if let Some(factor) = try_cholesky(m, eps) {
            log::debug!("cholesky needed jitter {eps:e}");
            return Ok(Cholesky { factor, jitter: eps });
        }
    }
    Err(Error::NotPositiveSemidefinite {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

fn try_cholesky(m: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = m.rows();
    let scale = m.diagonal().iter().fold(0.0f64, |a, &d| a.max(d.abs())) + jitter;
    let zero_tol = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j)[..j].to_vec();
        let d = m[(j, j)] + jitter - lj.iter().map(|v| v * v).sum::<f64>();
        if d > zero_tol {
            let pivot = d.sqrt();
            l[(j, j)] = pivot;
            for i in (j + 1)..n {
                let s = m[(i, j)] - dot(&l.row(i)[..j], &lj);
                l[(i, j)] = s / pivot;
            }
        } else if d >= -zero_tol {
            // Zero pivot: only consistent if the rest of the column vanishes too.
            for i in (j + 1)..n {
                let s = m[(i, j)] - dot(&l.row(i)[..j], &lj);
                if s.abs() > 1e-9 * scale.max(f64::MIN_POSITIVE) {
                    return None;
                }
            }
        } else {
            return None;
        }
    }
    l.is_finite().then_some(l)
}

/// Draws `mean + L·u` with `u` standard normal.
pub fn gaussian_sample(mean: &[f64], factor: &Matrix, rng: &mut Rng) -> Vec<f64> {
    let mut out = vec![0.0; mean.len()];
    let mut u = vec![0.0; mean.len()];
    gaussian_sample_into(mean, factor, rng, &mut u, &mut out);
    out
}

/// Allocation-free variant of [`gaussian_sample`]; `scratch` holds the normal draws.
pub fn gaussian_sample_into(
    mean: &[f64],
    factor: &Matrix,
    rng: &mut Rng,
    scratch: &mut [f64],
    out: &mut [f64],
) {
    let n = mean.len();
    assert!(
        factor.rows() == n && factor.cols() == n,
        "factor is {}x{} but mean has length {n}",
        factor.rows(),
        factor.cols()
    );
    assert_eq!(scratch.len(), n);
    assert_eq!(out.len(), n);
    scratch.iter_mut().for_each(|u| *u = rng.normal());
    for i in 0..n {
        // Lower-triangular: only the first i+1 entries of row i are non-zero.
        out[i] = mean[i] + dot(&factor.row(i)[..=i], &scratch[..=i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "empty")]
    fn softmax_empty_panics() {
        softmax(&[]);
    }

    #[test]
    fn cholesky_examples() {
        let id = cholesky_psd(&Matrix::identity(3)).unwrap();
        assert_eq!(id.factor, Matrix::identity(3));
        assert_eq!(id.jitter, 0.0);

        let s = cholesky_psd(&Matrix::from_rows(&[vec![4.0]])).unwrap();
        assert_eq!(s.factor[(0, 0)], 2.0);

        let c = cholesky_psd(&Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]])).unwrap();
        let expected = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2f64.sqrt()]]);
        assert!(c.factor.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn cholesky_zero_matrix_needs_no_jitter() {
        let c = cholesky_psd(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(c.factor, Matrix::zeros(3, 3));
        assert_eq!(c.jitter, 0.0);
    }

    #[test]
    fn cholesky_rank_deficient_reconstructs() {
        // v vᵀ with v = (1, 2, 3): rank one.
        let v = [1.0, 2.0, 3.0];
        let m = Matrix::from_rows(
            &v.iter()
                .map(|a| v.iter().map(|b| a * b).collect())
                .collect::<Vec<_>>(),
        );
        let c = cholesky_psd(&m).unwrap();
        let rec = c.factor.matmul(&c.factor.transpose());
        assert!(rec.max_abs_diff(&m) / m.frobenius() < 1e-6);
    }

    #[test]
    fn cholesky_rejects_indefinite_and_asymmetric() {
        let neg = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
        assert!(matches!(
            cholesky_psd(&neg),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
        let asym = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]);
        assert!(matches!(cholesky_psd(&asym), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_factor_returns_mean() {
        let mut rng = Rng::new(3);
        let mean = [1.5, -2.0, 0.25];
        assert_eq!(gaussian_sample(&mean, &Matrix::zeros(3, 3), &mut rng), mean);
    }

    #[test]
    #[should_panic(expected = "factor is")]
    fn sample_dimension_mismatch_panics() {
        gaussian_sample(&[0.0, 0.0], &Matrix::identity(3), &mut Rng::new(0));
    }

    #[test]
    fn sample_moments() {
        let cov = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let l = cholesky_psd(&cov).unwrap().factor;
        let mean = [1.0, -1.0];
        let n = 100_000;
        let mut rng = Rng::new(11);
        let draws: Vec<Vec<f64>> = (0..n).map(|_| gaussian_sample(&mean, &l, &mut rng)).collect();
        let emp_mean: Vec<f64> = (0..2)
            .map(|j| draws.iter().map(|d| d[j]).sum::<f64>() / n as f64)
            .collect();
        for j in 0..2 {
            let sigma = cov[(j, j)].sqrt();
            assert!((emp_mean[j] - mean[j]).abs() < 4.0 * sigma / (n as f64).sqrt());
        }
        let mut emp_cov = Matrix::zeros(2, 2);
        for d in &draws {
            for a in 0..2 {
                for b in 0..2 {
                    emp_cov[(a, b)] += (d[a] - emp_mean[a]) * (d[b] - emp_mean[b]);
                }
            }
        }
        emp_cov.scale_in_place(1.0 / (n - 1) as f64);
        let mut diff = emp_cov.clone();
        diff.add_scaled(&cov, -1.0);
        assert!(diff.frobenius() / cov.frobenius() < 0.05);
    }

    fn random_psd(dim: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        let a = Matrix::from_vec(dim, dim, (0..dim * dim).map(|_| rng.normal()).collect()).unwrap();
        let mut m = a.matmul(&a.transpose());
        m.symmetrize();
        m
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cholesky_round_trips_random_psd(dim in 1usize..=64, seed in any::<u64>()) {
            let m = random_psd(dim, seed);
            let c = cholesky_psd(&m).unwrap();
            let rec = c.factor.matmul(&c.factor.transpose());
            let mut diff = rec;
            diff.add_scaled(&m, -1.0);
            prop_assert!(diff.frobenius() / m.frobenius() < 1e-6);
            for i in 0..dim {
                for j in (i + 1)..dim {
                    prop_assert_eq!(c.factor[(i, j)], 0.0);
                }
            }
        }
    }
}
