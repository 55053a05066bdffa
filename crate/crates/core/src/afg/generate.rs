use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{calibrate, support_set, CalibratedDistribution, ClassStats};
use crate::data::{save_embeddings, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample_into, Matrix, Rng};

/// How many synthetic features each class receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub target: usize,
    pub cap: Option<usize>,
    pub counts: Vec<usize>,
    pub generate: Vec<usize>,
}

impl GenerationPlan {
    pub fn total(&self) -> usize {
        self.generate.iter().sum()
    }

    /// Classes that receive synthetic features.
    pub fn is_tail(&self, class: usize) -> bool {
        self.counts[class] < self.target
    }
}

/// `generate_k = min(target − N_k, cap)` for classes below `target`, else 0.
pub fn build_generation_plan(counts: &[usize], target: usize, cap: Option<usize>) -> GenerationPlan {
    let generate = counts
        .iter()
        .map(|&n| {
            let gap = target.saturating_sub(n);
            cap.map_or(gap, |c| gap.min(c))
        })
        .collect();
    GenerationPlan {
        target,
        cap,
        counts: counts.to_vec(),
        generate,
    }
}

/// Per-class calibration confidence, nudged by validation accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaState {
    pub beta: Vec<f64>,
    /// Classes whose β adapts; the others keep their initial value.
    pub tail: Vec<bool>,
    pub step: f64,
    /// Validation accuracy seen at the previous update.
    pub last_accuracy: Vec<Option<f64>>,
}

impl BetaState {
    pub fn new(tail: Vec<bool>, init: f64, step: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&init) {
            return Err(Error::contract(format!("initial beta {init} outside [0, 1]")));
        }
        if !(step >= 0.0) {
            return Err(Error::contract("beta step must be >= 0"));
        }
        let n = tail.len();
        Ok(Self {
            beta: vec![init; n],
            tail,
            step,
            last_accuracy: vec![None; n],
        })
    }

    /// Seeds the accuracy each class is compared against at the first update.
    pub fn with_baseline(mut self, accuracy: &[f64]) -> Self {
        self.last_accuracy = accuracy.iter().map(|&a| Some(a)).collect();
        self
    }
}

/// Raises `β_k` by the step when class k's accuracy improved, lowers it when
/// it dropped, and leaves it otherwise; always clamped to `[0, 1]`.
pub fn update_beta(state: &BetaState, accuracy: &[f64]) -> BetaState {
    assert_eq!(accuracy.len(), state.beta.len(), "one accuracy per class");
    let mut next = state.clone();
    for (k, &acc) in accuracy.iter().enumerate() {
        if state.tail[k] {
            if let Some(prev) = state.last_accuracy[k] {
                if acc > prev {
                    next.beta[k] = (state.beta[k] + state.step).min(1.0);
                } else if acc < prev {
                    next.beta[k] = (state.beta[k] - state.step).max(0.0);
                }
            }
        }
        next.last_accuracy[k] = Some(acc);
    }
    next
}

/// Provenance of one synthetic feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub class: usize,
    /// Id of the real sample the distribution was calibrated around.
    pub source: usize,
    pub support: Vec<usize>,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFeatures {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub records: Vec<GenerationRecord>,
}

impl GeneratedFeatures {
    pub fn empty(dim: usize) -> Self {
        Self {
            features: Matrix::zeros(0, dim),
            labels: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenates per-class results in the given order.
    pub fn concat(parts: Vec<GeneratedFeatures>, dim: usize) -> Self {
        let total: usize = parts.iter().map(GeneratedFeatures::len).sum();
        let mut data = Vec::with_capacity(total * dim);
        let mut labels = Vec::with_capacity(total);
        let mut records = Vec::with_capacity(total);
        for p in parts {
            data.extend_from_slice(p.features.as_slice());
            labels.extend(p.labels);
            records.extend(p.records);
        }
        Self {
            features: Matrix::from_vec(total, dim, data).expect("finite generated features"),
            labels,
            records,
        }
    }
}

/// Draws `plan.generate[class]` synthetic features for `class`.
///
/// Real samples (rows of `class_features`, already transformed) are visited
/// round-robin; each gets its own calibrated Gaussian, computed once and
/// reused on later passes. `source_ids[i]` names row `i` in the records.
/// Draws are clamped at zero.
#[allow(clippy::too_many_arguments)]
pub fn generate_for_class(
    class: usize,
    plan: &GenerationPlan,
    class_features: &Matrix,
    source_ids: &[usize],
    stats: &ClassStats,
    betas: &BetaState,
    gamma: f64,
    k_support: usize,
    rng: &mut Rng,
) -> Result<GeneratedFeatures> {
    let d = class_features.cols();
    let wanted = plan.generate[class];
    if wanted == 0 {
        return Ok(GeneratedFeatures::empty(d));
    }
    let n_real = class_features.rows();
    if n_real == 0 {
        return Err(Error::contract(format!("class {class} has no real features to calibrate around")));
    }
    if source_ids.len() != n_real {
        return Err(Error::contract("one source id per real feature"));
    }
    if k_support == 0 {
        return Err(Error::contract("support size K must be >= 1"));
    }
    let beta = betas.beta[class];
    let own_cov = &stats.covariances[class];

    // Eligibility depends only on class sizes, so either every sample has
    // support or none has.
    if support_set(class_features.row(0), class, stats, k_support).is_empty() {
        log::warn!("class {class} has no larger class to borrow from; nothing generated");
        return Ok(GeneratedFeatures::empty(d));
    }

    let mut cache: Vec<Option<CalibratedDistribution>> = vec![None; n_real.min(wanted)];
    let mut data = Vec::with_capacity(wanted * d);
    let mut records = Vec::with_capacity(wanted);
    let mut scratch = vec![0.0; d];
    let mut draw = vec![0.0; d];
    for i in 0..wanted {
        let src = i % n_real;
        if cache[src].is_none() {
            let x = class_features.row(src);
            let support = support_set(x, class, stats, k_support);
            cache[src] = Some(calibrate(x, own_cov, &support, stats, beta, gamma)?);
        }
        let dist = cache[src].as_ref().expect("filled above");
        gaussian_sample_into(&dist.mean, &dist.cholesky.factor, rng, &mut scratch, &mut draw);
        data.extend(draw.iter().map(|v| v.max(0.0)));
        records.push(GenerationRecord {
            class,
            source: source_ids[src],
            support: dist.support.clone(),
            beta,
        });
    }
    Ok(GeneratedFeatures {
        features: Matrix::from_vec(wanted, d, data)?,
        labels: vec![class; wanted],
        records,
    })
}

/// Writes generated features as an embedding file plus a tab-separated
/// `<path>.sidecar.tsv` listing `sample_id, source_class, source_sample, support, beta`.
pub fn save_generated(gen: &GeneratedFeatures, num_classes: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ds = EmbeddingDataset::new(gen.features.clone(), gen.labels.clone(), num_classes)?;
    save_embeddings(&ds, path)?;
    let mut text = String::from("sample_id\tsource_class\tsource_sample\tsupport\tbeta\n");
    for (i, r) in gen.records.iter().enumerate() {
        let support: Vec<String> = r.support.iter().map(usize::to_string).collect();
        writeln!(text, "{i}\t{}\t{}\t{}\t{}", r.class, r.source, support.join(","), r.beta)
            .expect("writing to a String");
    }
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".sidecar.tsv");
    fs::write(&sidecar, text).map_err(|e| Error::io(sidecar, e))
}
