//! Labeled embedding datasets, long-tail class counts, priors and Many/Medium/Few groups.

mod io;
mod synth;

pub use io::{load_embeddings, load_embeddings_csv, save_embeddings, EMBEDDING_MAGIC};
pub use synth::{synth_gaussian_mixture, GroundTruth, SynthConfig, SyntheticSplits};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Feature vectors with integer labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    class_counts: Vec<usize>,
}

impl EmbeddingDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::contract(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let mut class_counts = vec![0usize; num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::contract(format!(
                    "label {y} of sample {i} is outside [0, {num_classes})"
                )));
            }
            class_counts[y] += 1;
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            class_counts,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// Sample indices of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self
            .class_counts
            .iter()
            .map(|&n| Vec::with_capacity(n))
            .collect();
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Whether class counts are non-increasing in the class index.
    pub fn is_canonical(&self) -> bool {
        self.class_counts.windows(2).all(|w| w[0] >= w[1])
    }

    /// `map[old] = new` relabeling that sorts classes by descending count,
    /// ties kept in original index order.
    pub fn canonical_mapping(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.num_classes).collect();
        order.sort_by(|&a, &b| self.class_counts[b].cmp(&self.class_counts[a]).then(a.cmp(&b)));
        let mut map = vec![0; self.num_classes];
        for (new, &old) in order.iter().enumerate() {
            map[old] = new;
        }
        map
    }

    /// Applies `map[old] = new` to every label.
    pub fn relabel(&self, map: &[usize]) -> Result<Self> {
        if map.len() != self.num_classes {
            return Err(Error::contract(format!(
                "relabel map covers {} classes, dataset has {}",
                map.len(),
                self.num_classes
            )));
        }
        let labels = self.labels.iter().map(|&y| map[y]).collect();
        Self::new(self.features.clone(), labels, self.num_classes)
    }

    /// Relabels classes into descending-count order.
    pub fn canonicalize(&self) -> (Self, Vec<usize>) {
        let map = self.canonical_mapping();
        let ds = self.relabel(&map).expect("canonical map is a permutation");
        (ds, map)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.feature(i));
            labels.push(self.labels[i]);
        }
        let features = Matrix::from_vec(indices.len(), d, data).expect("rows copied from a valid matrix");
        Self::new(features, labels, self.num_classes).expect("labels copied from a valid dataset")
    }
}

/// Shape of an exponentially decaying long-tail training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub num_classes: usize,
    /// Size of the largest class.
    pub max_count: usize,
    /// Ratio of the largest to the smallest class size.
    pub imbalance: f64,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::contract("long-tail spec needs at least one class"));
        }
        if !(self.imbalance >= 1.0) {
            return Err(Error::contract(format!(
                "imbalance ratio {} must be >= 1",
                self.imbalance
            )));
        }
        if (self.max_count as f64) < self.imbalance {
            return Err(Error::contract(format!(
                "largest class {} is smaller than the imbalance ratio {}",
                self.max_count, self.imbalance
            )));
        }
        if self.num_classes < 2 && self.imbalance > 1.0 {
            return Err(Error::contract(
                "an imbalance ratio above 1 needs at least two classes",
            ));
        }
        Ok(())
    }
}

/// `N_k = round(N1 · IM^(−k/(L−1)))` for `k = 0..L`.
pub fn make_longtail_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let l = spec.num_classes;
    if l == 1 {
        return Ok(vec![spec.max_count]);
    }
    let n1 = spec.max_count as f64;
    Ok((0..l)
        .map(|k| {
            let n = (n1 * spec.imbalance.powf(-(k as f64) / (l - 1) as f64)).round();
            (n as usize).max(1)
        })
        .collect())
}

/// Empirical label distribution `N_k / N`.
pub fn class_priors(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::contract("priors of an empty count vector"));
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::contract(format!(
            "class {k} has no training samples, so it has no prior"
        )));
    }
    let total: usize = counts.iter().sum();
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Many, Group::Medium, Group::Few];

    pub fn name(self) -> &'static str {
        match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        }
    }
}

/// Per-class Many/Medium/Few tags derived from training counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub groups: Vec<Group>,
    /// Classes with strictly more samples than this are Many.
    pub many_min: usize,
    /// Classes with strictly fewer samples than this are Few.
    pub few_max: usize,
}

impl GroupAssignment {
    pub fn group_of(&self, class: usize) -> Group {
        self.groups[class]
    }

    pub fn classes_in(&self, group: Group) -> Vec<usize> {
        (0..self.groups.len())
            .filter(|&k| self.groups[k] == group)
            .collect()
    }

    pub fn is_many(&self, class: usize) -> bool {
        self.groups[class] == Group::Many
    }
}

pub const DEFAULT_MANY_MIN: usize = 100;
pub const DEFAULT_FEW_MAX: usize = 20;

pub fn assign_groups(counts: &[usize], many_min: usize, few_max: usize) -> Result<GroupAssignment> {
    if few_max > many_min {
        return Err(Error::contract(format!(
            "few_max {few_max} exceeds many_min {many_min}"
        )));
    }
    let groups = counts
        .iter()
        .map(|&n| {
            if n > many_min {
                Group::Many
            } else if n < few_max {
                Group::Few
            } else {
                Group::Medium
            }
        })
        .collect();
    Ok(GroupAssignment {
        groups,
        many_min,
        few_max,
    })
}
