//! `glag`: synthesize long-tailed embedding data, train the two-stage model,
//! probe and evaluate checkpoints, and run ablation sweeps.
//!
//! Exit codes: 0 success, 2 usage or config error (including unreadable or
//! corrupt inputs), 3 numeric failure during training.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use glag::data::{assign_groups, load_embeddings, save_embeddings, EmbeddingDataset};
use glag::losses::AlphaForm;
use glag::model::{load_checkpoint, save_checkpoint, ModelParams};
use glag::pipeline::{
    benchmark_splits, evaluate, probe_features, probe_split, run_ablation, run_two_stage, write_file,
    AblationAxis, MetricsDocument, RunConfig, StageOneLoss, Stages,
};
use glag::Error;

#[derive(Parser)]
#[command(name = "glag", version, about = "Two-stage long-tailed classification in feature space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic long-tailed benchmark (train/val/test/probe splits and ground truth)
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train stage one and/or stage two on embedding files
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.emb, val.emb and test.emb
        #[arg(long)]
        data: PathBuf,
        /// Stage-one checkpoint to start from when only stage two runs
        #[arg(long)]
        m1: Option<PathBuf>,
    },
    /// Run one ablation axis on the synthetic benchmark over all configured seeds
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Worker threads for independent cells (default: all cores)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Score a checkpoint's features: retrain a fresh classifier on balanced data
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding train.emb (for groups), probe.emb and test.emb
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding train.emb (for groups) and test.emb
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn get(self) -> bool {
        matches!(self, OnOff::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    LogitAdjust,
    Graloss,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    Convex,
    Linear,
    Concave,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    #[value(name = "alpha_form")]
    AlphaForm,
    #[value(name = "loss_choice")]
    LossChoice,
    #[value(name = "components")]
    Components,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Args)]
struct Common {
    /// Flat JSON config with RunConfig keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    alpha_form: Option<FormArg>,
    #[arg(long)]
    alpha_s: Option<f64>,
    #[arg(long)]
    alpha_c: Option<f64>,
    #[arg(long, value_enum)]
    afg: Option<OnOff>,
    #[arg(long, value_enum)]
    kd: Option<OnOff>,
    #[arg(long)]
    beta_init: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    k_support: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Imbalance ratio of the synthetic train split
    #[arg(long)]
    im: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.stage {
            c.stage = match v {
                StageArg::One => Stages::One,
                StageArg::Two => Stages::Two,
                StageArg::Both => Stages::Both,
            };
        }
        if let Some(v) = self.loss {
            c.loss = match v {
                LossArg::Ce => StageOneLoss::CrossEntropy,
                LossArg::LogitAdjust => StageOneLoss::LogitAdjust,
                LossArg::Graloss => StageOneLoss::GraLoss,
            };
        }
        if let Some(v) = self.alpha_form {
            c.alpha_form = match v {
                FormArg::Convex => AlphaForm::Convex,
                FormArg::Linear => AlphaForm::Linear,
                FormArg::Concave => AlphaForm::Concave,
            };
        }
        if let Some(v) = self.afg {
            c.afg = v.get();
        }
        if let Some(v) = self.kd {
            c.kd = v.get();
        }
        macro_rules! copy {
            ($($field:ident => $key:ident),*) => {
                $(if let Some(v) = self.$field { c.$key = v; })*
            };
        }
        copy!(tau => tau, alpha_s => alpha_s, alpha_c => alpha_c, beta_init => beta_init,
              gamma => gamma, k_support => k_support, lambda => lambda, im => imbalance);
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFiniteGradient { .. } | Error::NotPositiveSemidefinite { .. } => 3,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn echo_config(dir: &Path, c: &RunConfig) -> Result<(), Error> {
    write_file(&dir.join("config.json"), c.to_json().as_bytes())
}

fn load_split(dir: &Path, name: &str) -> Result<EmbeddingDataset, Error> {
    load_embeddings(dir.join(format!("{name}.emb")))
}

fn check_model_fits(m: &ModelParams, ds: &EmbeddingDataset) -> Result<(), Error> {
    if m.input_dim() != ds.dim() || m.num_classes() != ds.num_classes() {
        return Err(Error::Contract(format!(
            "checkpoint maps {} inputs to {} classes, data has dimension {} and {} classes",
            m.input_dim(),
            m.num_classes(),
            ds.dim(),
            ds.num_classes()
        )));
    }
    Ok(())
}

fn cmd_synth(common: &Common) -> Result<(), Error> {
    let c = common.resolve()?;
    let splits = benchmark_splits(&c, c.seed)?;
    let probe = probe_split(&splits, &c, c.seed);
    let out = &common.out;
    create_dir(out)?;
    save_embeddings(&splits.train, out.join("train.emb"))?;
    save_embeddings(&splits.val, out.join("val.emb"))?;
    save_embeddings(&splits.test, out.join("test.emb"))?;
    save_embeddings(&probe, out.join("probe.emb"))?;
    let truth = serde_json::to_string_pretty(&splits.truth)?;
    write_file(&out.join("truth.json"), truth.as_bytes())?;
    echo_config(out, &c)?;
    eprintln!(
        "wrote {} train / {} val / {} test samples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(common: &Common, data: &Path, m1_path: Option<&Path>) -> Result<(), Error> {
    let c = common.resolve()?;
    let train = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    let test = load_split(data, "test")?;
    let pretrained = match (c.stage, m1_path) {
        (Stages::Two, Some(p)) => {
            let m = load_checkpoint(p)?;
            check_model_fits(&m, &train)?;
            Some(m)
        }
        (Stages::Two, None) => {
            return Err(Error::Config {
                key: "m1".into(),
                message: "--stage 2 needs --m1 CHECKPOINT".into(),
            })
        }
        _ => None,
    };
    let outcome = run_two_stage(&train, &val, &test, &c, pretrained)?;
    let out = &common.out;
    create_dir(out)?;
    echo_config(out, &c)?;
    if c.stage.runs_one() {
        save_checkpoint(&outcome.m1, out.join("m1.ckpt"))?;
    }
    if let Some(m2) = &outcome.m2 {
        save_checkpoint(m2, out.join("m2.ckpt"))?;
    }
    MetricsDocument::from_outcome(&c, &outcome).write(out)?;
    for (name, r) in [("stage one", &outcome.stage1), ("stage two", &outcome.stage2)] {
        if let Some(r) = r {
            eprintln!(
                "{name}: test accuracy {:.4} ({:.1}s)",
                r.accuracy.overall, r.wall_clock_secs
            );
        }
    }
    Ok(())
}

fn cmd_ablate(common: &Common, axis: Axis, jobs: Option<usize>) -> Result<(), Error> {
    let c = common.resolve()?;
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::Config {
                key: "jobs".into(),
                message: "worker pool needs at least one thread".into(),
            });
        }
        // Fails only if the pool was already built, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let axis = match axis {
        Axis::AlphaForm => AblationAxis::AlphaForm,
        Axis::LossChoice => AblationAxis::LossChoice,
        Axis::Components => AblationAxis::Components,
    };
    let table = run_ablation(&c, axis)?;
    let out = &common.out;
    create_dir(out)?;
    echo_config(out, &c)?;
    let stem = format!("ablation_{}", axis.name());
    write_file(&out.join(format!("{stem}.json")), table.to_json().as_bytes())?;
    write_file(&out.join(format!("{stem}.csv")), table.to_csv().as_bytes())?;
    eprintln!("{} cells over {} seeds in {:.1}s", table.rows.len(), c.seeds.len(), table.wall_clock_secs);
    Ok(())
}

fn cmd_probe(common: &Common, checkpoint: &Path, data: &Path) -> Result<(), Error> {
    let c = common.resolve()?;
    let model = load_checkpoint(checkpoint)?;
    let train = load_split(data, "train")?;
    let balanced = load_split(data, "probe")?;
    let test = load_split(data, "test")?;
    for ds in [&train, &balanced, &test] {
        check_model_fits(&model, ds)?;
    }
    let groups = assign_groups(train.class_counts(), c.many_min, c.few_max)?;
    let report = probe_features(&model, &balanced, &test, &groups, &c)?;
    let out = &common.out;
    create_dir(out)?;
    echo_config(out, &c)?;
    MetricsDocument::new(&c, vec![("probe".into(), report)]).write(out)
}

fn cmd_eval(common: &Common, checkpoint: &Path, data: &Path) -> Result<(), Error> {
    let c = common.resolve()?;
    let model = load_checkpoint(checkpoint)?;
    let train = load_split(data, "train")?;
    let test = load_split(data, "test")?;
    check_model_fits(&model, &train)?;
    check_model_fits(&model, &test)?;
    let groups = assign_groups(train.class_counts(), c.many_min, c.few_max)?;
    let report = evaluate(&model, &test, &groups);
    let out = &common.out;
    create_dir(out)?;
    echo_config(out, &c)?;
    MetricsDocument::new(&c, vec![("eval".into(), report)]).write(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { common } => cmd_synth(common),
        Command::Train { common, data, m1 } => cmd_train(common, data, m1.as_deref()),
        Command::Ablate { common, axis, jobs } => cmd_ablate(common, *axis, *jobs),
        Command::Probe {
            common,
            checkpoint,
            data,
        } => cmd_probe(common, checkpoint, data),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => cmd_eval(common, checkpoint, data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
