use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, Group, GroupAssignment};
use crate::model::{Classifier, ModelParams};
use crate::numerics::Matrix;

/// Accuracies of one model on one split. Groups without any test sample are
/// `None`, as are classes without test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    /// Number of evaluated samples per class.
    pub support: Vec<usize>,
}

impl Accuracy {
    pub fn group(&self, g: Group) -> Option<f64> {
        match g {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }

    /// Per-class accuracy with absent classes read as 0; used for β updates.
    pub fn per_class_or_zero(&self) -> Vec<f64> {
        self.per_class.iter().map(|a| a.unwrap_or(0.0)).collect()
    }
}

/// One row of a training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub loss: f64,
    pub alpha: f64,
    pub lr: f64,
    /// Absent for the probe, which has no validation split.
    pub val_accuracy: Option<f64>,
    /// Synthetic features mixed into this epoch (stage two only).
    pub generated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Split the accuracies were measured on.
    pub split: String,
    pub accuracy: Accuracy,
    pub epochs: Vec<EpochTrace>,
    /// β of every class after each stage-two epoch.
    pub beta_trajectory: Vec<Vec<f64>>,
    /// Kept out of the serialized report so reruns compare byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn from_accuracy(split: &str, accuracy: Accuracy) -> Self {
        Self {
            split: split.to_string(),
            accuracy,
            epochs: Vec::new(),
            beta_trajectory: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn alpha_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.alpha).collect()
    }

    pub fn loss_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Accuracy of argmax predictions given one logit row per label.
pub fn accuracy_from_logits(logits: &Matrix, labels: &[usize], groups: &GroupAssignment) -> Accuracy {
    assert_eq!(logits.rows(), labels.len(), "one logit row per label");
    let l = groups.groups.len();
    assert_eq!(logits.cols(), l, "logit width must equal the class count");
    let mut correct = vec![0usize; l];
    let mut support = vec![0usize; l];
    for (row, &y) in logits.iter_rows().zip(labels) {
        support[y] += 1;
        if argmax(row) == y {
            correct[y] += 1;
        }
    }
    let ratio = |c: usize, n: usize| (n > 0).then(|| c as f64 / n as f64);
    let pooled = |g: Group| {
        let (c, n) = (0..l)
            .filter(|&k| groups.group_of(k) == g)
            .fold((0, 0), |(c, n), k| (c + correct[k], n + support[k]));
        ratio(c, n)
    };
    Accuracy {
        overall: ratio(correct.iter().sum(), support.iter().sum()).unwrap_or(0.0),
        many: pooled(Group::Many),
        medium: pooled(Group::Medium),
        few: pooled(Group::Few),
        per_class: (0..l).map(|k| ratio(correct[k], support[k])).collect(),
        support,
    }
}

pub fn classifier_accuracy(
    classifier: &Classifier,
    features: &Matrix,
    labels: &[usize],
    groups: &GroupAssignment,
) -> Accuracy {
    let (_, logits) = classifier.forward_batch(features);
    accuracy_from_logits(&logits, labels, groups)
}

/// Group-wise accuracy of `model` on `data`; predictions are the argmax logit.
pub fn evaluate(model: &ModelParams, data: &EmbeddingDataset, groups: &GroupAssignment) -> MetricsReport {
    let features = model.features(data.features());
    let acc = classifier_accuracy(&model.classifier, &features, data.labels(), groups);
    MetricsReport::from_accuracy("test", acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::assign_groups;

    fn groups3() -> GroupAssignment {
        // class 0 Many, class 1 Medium, class 2 Few
        assign_groups(&[200, 50, 5], 100, 20).unwrap()
    }

    fn one_hot(preds: &[usize], l: usize) -> Matrix {
        Matrix::from_rows(
            &preds
                .iter()
                .map(|&p| (0..l).map(|k| if k == p { 1.0 } else { 0.0 }).collect())
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn perfect_predictor() {
        let labels = [0, 1, 2, 2];
        let acc = accuracy_from_logits(&one_hot(&labels, 3), &labels, &groups3());
        assert_eq!(acc.overall, 1.0);
        assert_eq!((acc.many, acc.medium, acc.few), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn constant_predictor_on_balanced_test() {
        let labels: Vec<usize> = (0..3).flat_map(|k| [k; 4]).collect();
        let acc = accuracy_from_logits(&one_hot(&[0; 12], 3), &labels, &groups3());
        assert!((acc.overall - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(acc.few, Some(0.0));
    }

    #[test]
    fn hand_counted_six_samples() {
        // labels 0 0 1 1 2 2, predictions 0 1 1 1 0 2
        let labels = [0, 0, 1, 1, 2, 2];
        let acc = accuracy_from_logits(&one_hot(&[0, 1, 1, 1, 0, 2], 3), &labels, &groups3());
        assert_eq!(acc.overall, 4.0 / 6.0);
        assert_eq!(acc.per_class, vec![Some(0.5), Some(1.0), Some(0.5)]);
        assert_eq!((acc.many, acc.medium, acc.few), (Some(0.5), Some(1.0), Some(0.5)));
    }

    #[test]
    fn empty_group_is_absent() {
        let groups = assign_groups(&[200, 150], 100, 20).unwrap();
        let labels = [0, 1];
        let acc = accuracy_from_logits(&one_hot(&[0, 0], 2), &labels, &groups);
        assert_eq!(acc.few, None);
        assert_eq!(acc.medium, None);
        assert_eq!(acc.many, Some(0.5));
    }

    #[test]
    fn ties_break_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
    }
}
