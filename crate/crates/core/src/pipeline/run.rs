use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{evaluate, Accuracy, MetricsReport};
use super::train::{train_stage1, train_stage2};
use crate::data::{assign_groups, EmbeddingDataset, Group};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Models and reports of one two-stage run. Reports carry test accuracies
/// and validation traces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub m1: ModelParams,
    pub m2: Option<ModelParams>,
    pub stage1: Option<MetricsReport>,
    pub stage2: Option<MetricsReport>,
}

/// Runs the stages selected in `config.stage`. Stage two alone needs
/// `pretrained`, the stage-one model to start from.
pub fn run_two_stage(
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    test: &EmbeddingDataset,
    config: &RunConfig,
    pretrained: Option<ModelParams>,
) -> Result<RunOutcome> {
    config.validate()?;
    let groups = assign_groups(train.class_counts(), config.many_min, config.few_max)?;
    let (m1, stage1) = if config.stage.runs_one() {
        let (m, mut report) = train_stage1(train, val, config)?;
        report.split = "test".into();
        report.accuracy = evaluate(&m, test, &groups).accuracy;
        (m, Some(report))
    } else {
        let m = pretrained
            .ok_or_else(|| Error::contract("stage two alone needs a stage-one checkpoint"))?;
        (m, None)
    };
    let (m2, stage2) = if config.stage.runs_two() {
        let (m, mut report) = train_stage2(&m1, train, val, config)?;
        report.split = "test".into();
        report.accuracy = evaluate(&m, test, &groups).accuracy;
        (Some(m), Some(report))
    } else {
        (None, None)
    };
    Ok(RunOutcome {
        m1,
        m2,
        stage1,
        stage2,
    })
}

/// One line of the final accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub stage: String,
    pub group: String,
    pub accuracy: Option<f64>,
}

/// The metrics JSON document: config echo, per-stage reports, final table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub config: RunConfig,
    pub reports: Vec<(String, MetricsReport)>,
    pub table: Vec<TableRow>,
}

fn table_rows(stage: &str, acc: &Accuracy) -> Vec<TableRow> {
    let mut rows = vec![TableRow {
        stage: stage.into(),
        group: "overall".into(),
        accuracy: Some(acc.overall),
    }];
    rows.extend(Group::ALL.iter().map(|&g| TableRow {
        stage: stage.into(),
        group: g.name().into(),
        accuracy: acc.group(g),
    }));
    rows
}

impl MetricsDocument {
    pub fn new(config: &RunConfig, reports: Vec<(String, MetricsReport)>) -> Self {
        let table = reports
            .iter()
            .flat_map(|(stage, r)| table_rows(stage, &r.accuracy))
            .collect();
        Self {
            config: config.clone(),
            reports,
            table,
        }
    }

    pub fn from_outcome(config: &RunConfig, outcome: &RunOutcome) -> Self {
        let mut reports = Vec::new();
        if let Some(r) = &outcome.stage1 {
            reports.push(("stage1".to_string(), r.clone()));
        }
        if let Some(r) = &outcome.stage2 {
            reports.push(("stage2".to_string(), r.clone()));
        }
        Self::new(config, reports)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// `seed,stage,group,accuracy`, one row per stage and group; absent groups
    /// leave the accuracy empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,stage,group,accuracy\n");
        for row in &self.table {
            let acc = row.accuracy.map(|a| a.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{acc}", self.config.seed, row.stage, row.group).expect("String write");
        }
        out
    }

    /// Writes `metrics.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("metrics.json"), self.to_json().as_bytes())?;
        write_file(&dir.join("metrics.csv"), self.to_csv().as_bytes())
    }
}

/// Writes through a temporary sibling so a failed run leaves no partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
