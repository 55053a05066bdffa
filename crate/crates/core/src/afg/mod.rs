//! Adaptive feature generation for tail classes.
//!
//! Tail features are power-transformed towards Gaussianity, each one borrows
//! mean and covariance from its nearest larger classes (weighted by class size
//! over distance), and synthetic features are drawn from the resulting
//! Gaussian. A per-class confidence `β` controls how far the borrowed
//! statistics pull the distribution and is adapted from validation accuracy.

mod generate;

pub use generate::{
    build_generation_plan, generate_for_class, save_generated, update_beta, BetaState,
    GeneratedFeatures, GenerationPlan, GenerationRecord,
};

use crate::error::{Error, Result};
use crate::numerics::{cholesky_psd, euclidean_distance, Cholesky, Matrix};

/// Offset inside the logarithm of the `λ = 0` rung.
pub const TUKEY_LOG_EPS: f64 = 1e-6;

/// Distance substituted when a feature coincides with a support-class mean.
pub const MIN_DISTANCE: f64 = 1e-9;

/// Tukey's ladder of powers: `x^λ` for `λ > 0`, `ln(x + ε)` for `λ = 0`.
pub fn tukey_transform(x: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("tukey exponent {lambda} must be >= 0")));
    }
    if let Some(i) = x.iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::contract(format!(
            "tukey transform needs non-negative input, entry {i} is {}",
            x[i]
        )));
    }
    Ok(if lambda == 0.0 {
        x.iter().map(|v| (v + TUKEY_LOG_EPS).ln()).collect()
    } else if lambda == 1.0 {
        x.to_vec()
    } else {
        x.iter().map(|v| v.powf(lambda)).collect()
    })
}

/// Inverse of [`tukey_transform`] on its range. Negative inputs are clamped to
/// zero first when `λ > 0`.
pub fn inverse_tukey(y: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 0.0 {
        y.iter().map(|v| (v.exp() - TUKEY_LOG_EPS).max(0.0)).collect()
    } else if lambda == 1.0 {
        y.iter().map(|v| v.max(0.0)).collect()
    } else {
        y.iter().map(|v| v.max(0.0).powf(1.0 / lambda)).collect()
    }
}

/// Row-wise [`tukey_transform`] of a feature matrix.
pub fn tukey_transform_rows(x: &Matrix, lambda: f64) -> Result<Matrix> {
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for row in x.iter_rows() {
        out.extend(tukey_transform(row, lambda)?);
    }
    Matrix::from_vec(x.rows(), x.cols(), out)
}

/// Per-class mean, unbiased covariance and sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Matrix>,
    pub counts: Vec<usize>,
    /// Classes with a single sample, whose covariance is the pooled diagonal fallback.
    pub fallback: Vec<bool>,
}

impl ClassStats {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }
}

/// Class means and `1/(N_k − 1)` covariances.
///
/// Single-sample classes get a diagonal covariance holding the average
/// per-dimension variance of the classes with at least two samples.
pub fn estimate_class_stats(features: &Matrix, labels: &[usize], num_classes: usize) -> Result<ClassStats> {
    if features.rows() != labels.len() {
        return Err(Error::contract("one label per feature row"));
    }
    let d = features.cols();
    let mut counts = vec![0usize; num_classes];
    let mut sums = vec![vec![0.0; d]; num_classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        if y >= num_classes {
            return Err(Error::contract(format!("label {y} out of range")));
        }
        counts[y] += 1;
        sums[y].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::contract(format!("class {k} has no samples")));
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();

    let mut covariances = vec![Matrix::zeros(d, d); num_classes];
    let mut centered = vec![0.0; d];
    for (row, &y) in features.iter_rows().zip(labels) {
        centered
            .iter_mut()
            .zip(row.iter().zip(&means[y]))
            .for_each(|(c, (x, m))| *c = x - m);
        let cov = &mut covariances[y];
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            // Upper triangle only; mirrored below.
            for b in a..d {
                cov[(a, b)] += ca * centered[b];
            }
        }
    }
    for (cov, &n) in covariances.iter_mut().zip(&counts) {
        if n < 2 {
            continue;
        }
        let inv = 1.0 / (n - 1) as f64;
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] * inv;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
    }

    let fallback: Vec<bool> = counts.iter().map(|&n| n < 2).collect();
    if fallback.iter().any(|&f| f) {
        let donors: Vec<usize> = (0..num_classes).filter(|&k| !fallback[k]).collect();
        let mut pooled = vec![0.0; d];
        for &k in &donors {
            pooled
                .iter_mut()
                .zip(covariances[k].diagonal())
                .for_each(|(p, v)| *p += v);
        }
        if !donors.is_empty() {
            pooled.iter_mut().for_each(|p| *p /= donors.len() as f64);
        }
        for k in (0..num_classes).filter(|&k| fallback[k]) {
            log::warn!("class {k} has a single sample; using pooled diagonal covariance");
            covariances[k] = Matrix::from_diagonal(&pooled);
        }
    }
    Ok(ClassStats {
        means,
        covariances,
        counts,
        fallback,
    })
}

/// The `k` classes with more samples than `class` whose means lie closest to
/// `x` (Euclidean), nearest first; ties go to the smaller class index.
/// Empty when `class` has no larger class.
pub fn support_set(x: &[f64], class: usize, stats: &ClassStats, k: usize) -> Vec<usize> {
    let own = stats.counts[class];
    let mut eligible: Vec<(f64, usize)> = (0..stats.num_classes())
        .filter(|&j| stats.counts[j] > own)
        .map(|j| (euclidean_distance(x, &stats.means[j]), j))
        .collect();
    eligible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    eligible.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Gaussian a synthetic feature is drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedDistribution {
    pub mean: Vec<f64>,
    /// Symmetrized covariance before any jitter.
    pub covariance: Matrix,
    pub cholesky: Cholesky,
    pub support: Vec<usize>,
    /// `N_j / d_j` for every support class, in `support` order.
    pub weights: Vec<f64>,
}

/// Calibrates the distribution around `x` with support classes `support`:
///
/// ```text
/// ω_j = N_j / d_j,   d_j = ‖x − μ_j‖
/// μ = (1 − β)·x + β·Σ ω_j μ_j / Σ ω_j
/// Σ = (1 − β)²·Σ_own + β²·Σ ω_j Σ_j / Σ ω_j + γ·I
/// ```
pub fn calibrate(
    x: &[f64],
    own_cov: &Matrix,
    support: &[usize],
    stats: &ClassStats,
    beta: f64,
    gamma: f64,
) -> Result<CalibratedDistribution> {
    if support.is_empty() {
        return Err(Error::contract("calibration needs a non-empty support set"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::contract(format!("beta {beta} outside [0, 1]")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::contract(format!("gamma {gamma} must be >= 0")));
    }
    let d = x.len();
    if own_cov.rows() != d || own_cov.cols() != d {
        return Err(Error::contract("own covariance does not match the feature width"));
    }

    let weights: Vec<f64> = support
        .iter()
        .map(|&j| {
            let mut dist = euclidean_distance(x, &stats.means[j]);
            if dist == 0.0 {
                log::warn!("feature coincides with the mean of class {j}; using distance {MIN_DISTANCE:e}");
                dist = MIN_DISTANCE;
            }
            stats.counts[j] as f64 / dist
        })
        .collect();
    let total: f64 = weights.iter().sum();

    let mut support_mean = vec![0.0; d];
    let mut support_cov = Matrix::zeros(d, d);
    for (&j, &w) in support.iter().zip(&weights) {
        let share = w / total;
        support_mean
            .iter_mut()
            .zip(&stats.means[j])
            .for_each(|(m, v)| *m += share * v);
        support_cov.add_scaled(&stats.covariances[j], share);
    }

    let mean: Vec<f64> = x
        .iter()
        .zip(&support_mean)
        .map(|(xi, mi)| (1.0 - beta) * xi + beta * mi)
        .collect();
    let mut covariance = own_cov.clone();
    covariance.scale_in_place((1.0 - beta) * (1.0 - beta));
    covariance.add_scaled(&support_cov, beta * beta);
    covariance.add_diagonal(gamma);
    covariance.symmetrize();
    let cholesky = cholesky_psd(&covariance)?;
    Ok(CalibratedDistribution {
        mean,
        covariance,
        cholesky,
        support: support.to_vec(),
        weights,
    })
}
