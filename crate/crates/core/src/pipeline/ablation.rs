use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RunConfig, StageOneLoss};
use super::eval::{evaluate, Accuracy, MetricsReport};
use super::train::{probe_features, train_stage1, train_stage2, STREAM_PROBE_DATA};
use crate::data::{assign_groups, synth_gaussian_mixture, EmbeddingDataset, SyntheticSplits};
use crate::error::{Error, Result};
use crate::losses::AlphaForm;
use crate::model::ModelParams;
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Shape of the α ramp, scored by the feature probe.
    AlphaForm,
    /// Stage-one loss crossed with the decoupled stage-two method.
    LossChoice,
    /// Component on/off grid of the full method.
    Components,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::AlphaForm => "alpha_form",
            AblationAxis::LossChoice => "loss_choice",
            AblationAxis::Components => "components",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha_form" => Ok(AblationAxis::AlphaForm),
            "loss_choice" => Ok(AblationAxis::LossChoice),
            "components" => Ok(AblationAxis::Components),
            other => Err(Error::Config {
                key: "axis".into(),
                message: format!("unknown ablation axis `{other}`"),
            }),
        }
    }
}

/// One setting of an ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub config: RunConfig,
    pub stage2: bool,
    pub probe: bool,
}

fn cell(name: &str, config: RunConfig, stage2: bool, probe: bool) -> AblationCell {
    AblationCell {
        name: name.into(),
        config,
        stage2,
        probe,
    }
}

/// The settings an axis sweeps, in table order.
pub fn ablation_cells(base: &RunConfig, axis: AblationAxis) -> Vec<AblationCell> {
    let with_loss = |loss| RunConfig { loss, ..base.clone() };
    match axis {
        AblationAxis::AlphaForm => {
            let form = |form, c| RunConfig {
                loss: StageOneLoss::GraLoss,
                alpha_form: form,
                alpha_c: c,
                ..base.clone()
            };
            vec![
                cell("linear", form(AlphaForm::Linear, 2.0), false, true),
                cell("concave", form(AlphaForm::Concave, 2.0), false, true),
                cell("convex(c=4)", form(AlphaForm::Convex, 4.0), false, true),
                cell("convex(c=6)", form(AlphaForm::Convex, 6.0), false, true),
                cell("convex(c=8)", form(AlphaForm::Convex, 8.0), false, true),
                cell("convex(c=2)", form(AlphaForm::Convex, 2.0), false, true),
            ]
        }
        AblationAxis::LossChoice => {
            let mut cells = Vec::new();
            for (label, loss) in [
                ("CE", StageOneLoss::CrossEntropy),
                ("GraLoss", StageOneLoss::GraLoss),
                ("LogitLoss", StageOneLoss::LogitAdjust),
            ] {
                // Classifier retraining: fresh classifier, class-balanced sampling.
                let crt = RunConfig {
                    afg: false,
                    kd: false,
                    warm_start: false,
                    learnable_scaling: false,
                    train_classifier_weights: true,
                    balanced_sampling: true,
                    ..with_loss(loss)
                };
                // Learnable weight scaling: keep the classifier, learn per-class scales only.
                let lws = RunConfig {
                    afg: false,
                    kd: false,
                    warm_start: true,
                    learnable_scaling: true,
                    train_classifier_weights: false,
                    balanced_sampling: true,
                    ..with_loss(loss)
                };
                cells.push(cell(&format!("{label}+cRT"), crt, true, false));
                cells.push(cell(&format!("{label}+LWS"), lws, true, false));
            }
            cells
        }
        AblationAxis::Components => {
            let stage2 = |loss, kd| RunConfig {
                afg: true,
                adapt_beta: true,
                kd,
                ..with_loss(loss)
            };
            vec![
                cell("CE", with_loss(StageOneLoss::CrossEntropy), false, false),
                cell("GraLoss", with_loss(StageOneLoss::GraLoss), false, false),
                cell("LogitLoss", with_loss(StageOneLoss::LogitAdjust), false, false),
                cell("GraLoss+AD", stage2(StageOneLoss::GraLoss, false), true, false),
                cell("LogitLoss+AD+KD", stage2(StageOneLoss::LogitAdjust, true), true, false),
                cell("CE+AD+KD", stage2(StageOneLoss::CrossEntropy, true), true, false),
                cell("GraLoss+AD+KD", stage2(StageOneLoss::GraLoss, true), true, false),
            ]
        }
    }
}

/// Result of one cell on one seed. Accuracies are on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub stage1: MetricsReport,
    pub stage2: Option<MetricsReport>,
    pub probe: Option<MetricsReport>,
}

impl SeedResult {
    /// Accuracy of the last stage the cell ran.
    pub fn final_accuracy(&self) -> &Accuracy {
        &self.stage2.as_ref().unwrap_or(&self.stage1).accuracy
    }

    pub fn probe_score(&self) -> Option<f64> {
        self.probe.as_ref().map(|p| p.accuracy.overall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub seeds: Vec<SeedResult>,
    pub mean_overall: f64,
    pub mean_many: Option<f64>,
    pub mean_medium: Option<f64>,
    pub mean_few: Option<f64>,
    pub mean_probe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub config: RunConfig,
    /// SHA-256 over every seed's train, val and test splits.
    pub dataset_hash: String,
    pub rows: Vec<AblationRow>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<Vec<_>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl AblationTable {
    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ablation table serializes")
    }

    /// One line per cell with seed-averaged test accuracies.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
        let mut out =
            String::from("axis,cell,seeds,dataset_hash,overall,many,medium,few,probe\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.axis.name(),
                r.cell,
                r.seeds.len(),
                self.dataset_hash,
                r.mean_overall,
                fmt(r.mean_many),
                fmt(r.mean_medium),
                fmt(r.mean_few),
                fmt(r.mean_probe)
            )
            .expect("String write");
        }
        out
    }
}

fn hash_dataset(h: &mut Sha256, ds: &EmbeddingDataset) {
    h.update((ds.len() as u64).to_le_bytes());
    h.update((ds.dim() as u64).to_le_bytes());
    for v in ds.features().as_slice() {
        h.update(v.to_le_bytes());
    }
    for &y in ds.labels() {
        h.update((y as u64).to_le_bytes());
    }
}

/// Hex SHA-256 of the splits, in order.
pub fn dataset_hash(splits: &[&SyntheticSplits]) -> String {
    let mut h = Sha256::new();
    for s in splits {
        hash_dataset(&mut h, &s.train);
        hash_dataset(&mut h, &s.val);
        hash_dataset(&mut h, &s.test);
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").expect("String write");
        s
    })
}

/// Splits of the synthetic benchmark for one seed.
pub fn benchmark_splits(config: &RunConfig, seed: u64) -> Result<SyntheticSplits> {
    synth_gaussian_mixture(&config.synth_config(), &mut Rng::new(seed))
}

/// Balanced training split drawn from the same mixture, for the probe.
pub fn probe_split(splits: &SyntheticSplits, config: &RunConfig, seed: u64) -> EmbeddingDataset {
    let counts = vec![config.max_count; splits.truth.num_classes()];
    splits
        .truth
        .sample(&counts, &mut Rng::derive(seed, STREAM_PROBE_DATA))
}

/// Settings stage one depends on; cells agreeing on it share one stage-one model.
fn stage1_key(c: &RunConfig) -> String {
    match c.loss {
        StageOneLoss::CrossEntropy => "ce".into(),
        StageOneLoss::LogitAdjust => format!("la:{}", c.tau),
        StageOneLoss::GraLoss => format!("gra:{}:{}:{}", c.alpha_form.name(), c.alpha_s, c.alpha_c),
    }
}

fn run_seed(cells: &[AblationCell], splits: &SyntheticSplits, base: &RunConfig, seed: u64) -> Result<Vec<SeedResult>> {
    let groups = assign_groups(splits.train.class_counts(), base.many_min, base.few_max)?;
    let mut keys: BTreeMap<String, RunConfig> = BTreeMap::new();
    for c in cells {
        keys.entry(stage1_key(&c.config))
            .or_insert_with(|| RunConfig { seed, ..c.config.clone() });
    }
    let trained: BTreeMap<String, (ModelParams, MetricsReport)> = keys
        .into_par_iter()
        .map(|(k, cfg)| {
            let (m, mut report) = train_stage1(&splits.train, &splits.val, &cfg)?;
            report.split = "test".into();
            report.accuracy = evaluate(&m, &splits.test, &groups).accuracy;
            Ok((k, (m, report)))
        })
        .collect::<Result<_>>()?;
    let probe_train = cells
        .iter()
        .any(|c| c.probe)
        .then(|| probe_split(splits, base, seed));

    cells
        .par_iter()
        .map(|c| {
            let cfg = RunConfig { seed, ..c.config.clone() };
            let (m1, stage1) = &trained[&stage1_key(&cfg)];
            let stage2 = if c.stage2 {
                let (m2, mut report) = train_stage2(m1, &splits.train, &splits.val, &cfg)?;
                report.split = "test".into();
                report.accuracy = evaluate(&m2, &splits.test, &groups).accuracy;
                Some(report)
            } else {
                None
            };
            let probe = match &probe_train {
                Some(bal) if c.probe => Some(probe_features(m1, bal, &splits.test, &groups, &cfg)?),
                _ => None,
            };
            Ok(SeedResult {
                seed,
                stage1: stage1.clone(),
                stage2,
                probe,
            })
        })
        .collect()
}

/// Runs every cell of `axis` on the synthetic benchmark for each of `config.seeds`.
///
/// Within a seed all cells see the same splits and the same training
/// randomness, so rows differ only in the swept setting.
pub fn run_ablation(config: &RunConfig, axis: AblationAxis) -> Result<AblationTable> {
    config.validate()?;
    if config.seeds.is_empty() {
        return Err(Error::Config {
            key: "seeds".into(),
            message: "an ablation needs at least one seed".into(),
        });
    }
    let start = Instant::now();
    let cells = ablation_cells(config, axis);
    let splits: Vec<SyntheticSplits> = config
        .seeds
        .iter()
        .map(|&s| benchmark_splits(config, s))
        .collect::<Result<_>>()?;
    let hash = dataset_hash(&splits.iter().collect::<Vec<_>>());
    let per_seed: Vec<Vec<SeedResult>> = config
        .seeds
        .par_iter()
        .zip(&splits)
        .map(|(&seed, s)| run_seed(&cells, s, config, seed))
        .collect::<Result<_>>()?;

    let rows = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let seeds: Vec<SeedResult> = per_seed.iter().map(|r| r[i].clone()).collect();
            let acc = |f: fn(&Accuracy) -> Option<f64>| mean(seeds.iter().map(|s| f(s.final_accuracy())));
            AblationRow {
                cell: c.name.clone(),
                mean_overall: acc(|a| Some(a.overall)).unwrap_or(0.0),
                mean_many: acc(|a| a.many),
                mean_medium: acc(|a| a.medium),
                mean_few: acc(|a| a.few),
                mean_probe: if c.probe {
                    mean(seeds.iter().map(SeedResult::probe_score))
                } else {
                    None
                },
                seeds,
            }
        })
        .collect();
    Ok(AblationTable {
        axis,
        config: config.clone(),
        dataset_hash: hash,
        rows,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}
