use serde::{Deserialize, Serialize};

use crate::data::{LongTailSpec, SynthConfig, DEFAULT_FEW_MAX, DEFAULT_MANY_MIN};
use crate::error::{Error, Result};
use crate::losses::{AlphaForm, ScheduleSpec};

/// Loss used to train the feature model in stage one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageOneLoss {
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "logit-adjust")]
    LogitAdjust,
    #[serde(rename = "graloss")]
    GraLoss,
}

impl StageOneLoss {
    pub fn name(self) -> &'static str {
        match self {
            StageOneLoss::CrossEntropy => "ce",
            StageOneLoss::LogitAdjust => "logit-adjust",
            StageOneLoss::GraLoss => "graloss",
        }
    }
}

impl std::str::FromStr for StageOneLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(StageOneLoss::CrossEntropy),
            "logit-adjust" => Ok(StageOneLoss::LogitAdjust),
            "graloss" => Ok(StageOneLoss::GraLoss),
            other => Err(Error::Config {
                key: "loss".into(),
                message: format!("unknown loss `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stages {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "both")]
    Both,
}

impl Stages {
    pub fn runs_one(self) -> bool {
        matches!(self, Stages::One | Stages::Both)
    }

    pub fn runs_two(self) -> bool {
        matches!(self, Stages::Two | Stages::Both)
    }
}

/// Every setting of a run, as one flat record. This is also the JSON config
/// file format; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds of an ablation sweep.
    pub seeds: Vec<u64>,
    pub stage: Stages,

    // synthetic benchmark
    pub num_classes: usize,
    pub max_count: usize,
    pub imbalance: f64,
    pub dim: usize,
    pub separation: f64,
    pub val_per_class: usize,
    pub test_per_class: usize,

    // architecture and optimizer
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,

    // stage one
    pub stage1_epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub loss: StageOneLoss,
    pub tau: f64,
    pub alpha_form: AlphaForm,
    pub alpha_s: f64,
    pub alpha_c: f64,

    // stage two
    pub stage2_epochs: usize,
    /// Peak stage-two learning rate; `None` means a tenth of `lr`.
    pub stage2_lr: Option<f64>,
    pub warm_start: bool,
    pub learnable_scaling: bool,
    /// Update classifier weights and bias in stage two (off = scales only).
    pub train_classifier_weights: bool,
    /// Oversample real features of every class up to the target when AFG is off.
    pub balanced_sampling: bool,
    pub kd: bool,
    pub kd_temperature: f64,
    pub afg: bool,
    pub adapt_beta: bool,
    pub k_support: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub beta_init: f64,
    pub beta_step: f64,
    /// Per-class count after generation; `None` means the largest class size.
    pub target: Option<usize>,
    pub cap: Option<usize>,

    // probe
    pub probe_epochs: usize,

    // evaluation groups
    pub many_min: usize,
    pub few_max: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            stage: Stages::Both,
            num_classes: 20,
            max_count: 500,
            imbalance: 100.0,
            dim: 16,
            separation: 2.0,
            val_per_class: 100,
            test_per_class: 100,
            hidden: vec![64, 32],
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            stage1_epochs: 100,
            lr: 0.05,
            lr_min: 0.0,
            loss: StageOneLoss::GraLoss,
            tau: 1.0,
            alpha_form: AlphaForm::Convex,
            alpha_s: 1.0,
            alpha_c: 2.0,
            stage2_epochs: 40,
            stage2_lr: None,
            warm_start: true,
            learnable_scaling: true,
            train_classifier_weights: true,
            balanced_sampling: false,
            kd: true,
            kd_temperature: 2.0,
            afg: true,
            adapt_beta: true,
            k_support: 3,
            lambda: 0.5,
            gamma: 0.1,
            beta_init: 0.6,
            beta_step: 0.05,
            target: None,
            cap: None,
            probe_epochs: 30,
            many_min: DEFAULT_MANY_MIN,
            few_max: DEFAULT_FEW_MAX,
        }
    }
}

fn bad(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Plain decoupled baseline: cross-entropy stage one, stage two retrains the
    /// classifier on real features only.
    pub fn baseline() -> Self {
        Self {
            loss: StageOneLoss::CrossEntropy,
            afg: false,
            adapt_beta: false,
            kd: false,
            learnable_scaling: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 {
            return Err(bad("stage1_epochs", "must be >= 1"));
        }
        if self.stage2_epochs == 0 {
            return Err(bad("stage2_epochs", "must be >= 1"));
        }
        if self.probe_epochs == 0 {
            return Err(bad("probe_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(bad("hidden", "needs at least one positive layer width"));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(bad("lr", "need 0 <= lr_min <= lr and lr > 0"));
        }
        if let Some(lr2) = self.stage2_lr {
            if !(lr2 > 0.0) {
                return Err(bad("stage2_lr", "must be > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be >= 0"));
        }
        if !(self.tau >= 0.0) {
            return Err(bad("tau", "must be >= 0"));
        }
        self.schedule(1.0)
            .validate()
            .map_err(|e| bad("alpha_c", e.to_string()))?;
        if !(self.kd_temperature > 0.0) {
            return Err(bad("kd_temperature", "must be > 0"));
        }
        if self.k_support == 0 {
            return Err(bad("k_support", "must be >= 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(bad("lambda", "must be >= 0"));
        }
        if !(self.gamma >= 0.0) {
            return Err(bad("gamma", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.beta_init) {
            return Err(bad("beta_init", "must lie in [0, 1]"));
        }
        if !(self.beta_step >= 0.0) {
            return Err(bad("beta_step", "must be >= 0"));
        }
        if self.few_max > self.many_min {
            return Err(bad("few_max", "must not exceed many_min"));
        }
        if !self.learnable_scaling && !self.train_classifier_weights {
            return Err(bad(
                "train_classifier_weights",
                "stage two needs either weights or scales to train",
            ));
        }
        self.synth_config()
            .longtail
            .validate()
            .map_err(|e| bad("imbalance", e.to_string()))?;
        if self.dim < 2 {
            return Err(bad("dim", "must be >= 2"));
        }
        if !(self.separation > 0.0) {
            return Err(bad("separation", "must be > 0"));
        }
        Ok(())
    }

    pub fn schedule(&self, t_max: f64) -> ScheduleSpec {
        ScheduleSpec {
            s: self.alpha_s,
            c: self.alpha_c,
            form: self.alpha_form,
            t_max,
        }
    }

    pub fn stage2_peak_lr(&self) -> f64 {
        self.stage2_lr.unwrap_or(0.1 * self.lr)
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            longtail: LongTailSpec {
                num_classes: self.num_classes,
                max_count: self.max_count,
                imbalance: self.imbalance,
            },
            dim: self.dim,
            separation: self.separation,
            val_per_class: self.val_per_class,
            test_per_class: self.test_per_class,
        }
    }

    /// Parses a flat JSON config; unknown keys are rejected by name.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let key = msg
                .split('`')
                .nth(1)
                .unwrap_or("<document>")
                .to_string();
            Error::Config { key, message: msg }
        })?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
