use serde::{Deserialize, Serialize};

use super::{make_longtail_counts, EmbeddingDataset, LongTailSpec};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Parameters of the synthetic Gaussian-mixture benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub longtail: LongTailSpec,
    pub dim: usize,
    /// Width of the box `[1, 1 + separation]^D` the class means are drawn from.
    pub separation: f64,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            longtail: LongTailSpec {
                num_classes: 20,
                max_count: 500,
                imbalance: 100.0,
            },
            dim: 16,
            separation: 2.0,
            val_per_class: 100,
            test_per_class: 100,
        }
    }
}

/// Generating parameters of every class: mean vector and diagonal variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Draws `counts[k]` samples of every class k, clamped at zero and
    /// rounded to `f32` precision so the binary file format stores them exactly.
    pub fn sample(&self, counts: &[usize], rng: &mut Rng) -> EmbeddingDataset {
        assert_eq!(counts.len(), self.num_classes());
        let d = self.dim();
        let total: usize = counts.iter().sum();
        let mut data = Vec::with_capacity(total * d);
        let mut labels = Vec::with_capacity(total);
        for (k, &n) in counts.iter().enumerate() {
            let mean = &self.means[k];
            let var = &self.variances[k];
            for _ in 0..n {
                for j in 0..d {
                    let x = mean[j] + var[j].sqrt() * rng.normal();
                    data.push(x.max(0.0) as f32 as f64);
                }
                labels.push(k);
            }
        }
        let features = Matrix::from_vec(total, d, data).expect("finite synthetic features");
        EmbeddingDataset::new(features, labels, counts.len()).expect("labels in range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplits {
    pub train: EmbeddingDataset,
    pub val: EmbeddingDataset,
    pub test: EmbeddingDataset,
    pub truth: GroundTruth,
}

/// Long-tailed train split plus balanced val/test splits from one Gaussian mixture.
///
/// Means are uniform in `[1, 1 + separation]^D` and per-dimension variances
/// uniform in `[0.25, 1]`, so almost all mass sits in the positive orthant.
pub fn synth_gaussian_mixture(config: &SynthConfig, rng: &mut Rng) -> Result<SyntheticSplits> {
    if config.dim < 2 {
        return Err(Error::contract(format!(
            "synthetic features need dimension >= 2, got {}",
            config.dim
        )));
    }
    if !(config.separation > 0.0) || !config.separation.is_finite() {
        return Err(Error::contract(format!(
            "separation must be positive, got {}",
            config.separation
        )));
    }
    let counts = make_longtail_counts(&config.longtail)?;
    let l = counts.len();
    let d = config.dim;

    let means = (0..l)
        .map(|_| {
            (0..d)
                .map(|_| rng.uniform_range(1.0, 1.0 + config.separation))
                .collect()
        })
        .collect();
    let variances = (0..l)
        .map(|_| (0..d).map(|_| rng.uniform_range(0.25, 1.0)).collect())
        .collect();
    let truth = GroundTruth { means, variances };

    let train = truth.sample(&counts, rng);
    let val = truth.sample(&vec![config.val_per_class; l], rng);
    let test = truth.sample(&vec![config.test_per_class; l], rng);
    Ok(SyntheticSplits {
        train,
        val,
        test,
        truth,
    })
}
