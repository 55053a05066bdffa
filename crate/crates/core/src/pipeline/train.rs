use std::time::Instant;

use rayon::prelude::*;

use super::config::{RunConfig, StageOneLoss};
use super::eval::{classifier_accuracy, Accuracy, EpochTrace, MetricsReport};
use crate::afg::{
    build_generation_plan, estimate_class_stats, generate_for_class, inverse_tukey,
    tukey_transform_rows, update_beta, BetaState, GeneratedFeatures, GenerationPlan,
};
use crate::data::{assign_groups, class_priors, EmbeddingDataset, GroupAssignment};
use crate::error::{Error, Result};
use crate::losses::{
    alpha_at, batch_loss, cross_entropy, gra_loss, stage2_loss, LogPriors,
};
use crate::model::{
    cosine_lr, sgd_step, Architecture, Classifier, Gradients, ModelParams, OptState,
};
use crate::numerics::{Matrix, Rng};

// Rng streams derived from the run seed; stream 0 is reserved for data synthesis.
pub(crate) const STREAM_PROBE_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_STAGE1_ORDER: u64 = 3;
const STREAM_STAGE2_INIT: u64 = 4;
const STREAM_STAGE2_ORDER: u64 = 5;
const STREAM_PROBE_INIT: u64 = 6;
const STREAM_PROBE_ORDER: u64 = 7;
pub(crate) const STREAM_RANDOM_FEATURES: u64 = 8;

fn generation_stream(epoch: usize, class: usize) -> u64 {
    (1 << 40) | ((epoch as u64) << 20) | class as u64
}

fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    Matrix::from_vec(rows.len(), m.cols(), data).expect("rows of a finite matrix")
}

fn groups_for(train: &EmbeddingDataset, config: &RunConfig) -> Result<GroupAssignment> {
    assign_groups(train.class_counts(), config.many_min, config.few_max)
}

fn check_same_classes(train: &EmbeddingDataset, other: &EmbeddingDataset, what: &str) -> Result<()> {
    if other.num_classes() != train.num_classes() || other.dim() != train.dim() {
        return Err(Error::contract(format!(
            "{what} split has {} classes of dimension {}, train has {} of dimension {}",
            other.num_classes(),
            other.dim(),
            train.num_classes(),
            train.dim()
        )));
    }
    Ok(())
}

/// α of stage one at 0-based epoch `t`.
pub fn stage1_alpha(config: &RunConfig, t: usize) -> f64 {
    match config.loss {
        StageOneLoss::CrossEntropy => 0.0,
        StageOneLoss::LogitAdjust => config.tau,
        StageOneLoss::GraLoss => alpha_at(&config.schedule(config.stage1_epochs as f64), t as f64),
    }
}

/// Distillation weight of stage two at 0-based epoch `t`.
pub fn stage2_alpha(config: &RunConfig, t: usize) -> f64 {
    if config.kd {
        alpha_at(&config.schedule(config.stage2_epochs as f64), t as f64)
    } else {
        0.0
    }
}

/// Trains feature model and classifier end to end on the long-tailed split.
pub fn train_stage1(
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    config: &RunConfig,
) -> Result<(ModelParams, MetricsReport)> {
    config.validate()?;
    check_same_classes(train, val, "validation")?;
    let start = Instant::now();
    let groups = groups_for(train, config)?;
    let l = train.num_classes();
    let arch = Architecture {
        input_dim: train.dim(),
        hidden: config.hidden.clone(),
        num_classes: l,
    };
    let mut model = ModelParams::init(&arch, &mut Rng::derive(config.seed, STREAM_INIT))?;
    let mut opt = OptState::new(&model, config.momentum, config.weight_decay);
    let log_priors = LogPriors::new(&class_priors(train.class_counts())?)?;
    let mut order_rng = Rng::derive(config.seed, STREAM_STAGE1_ORDER);
    let epochs = config.stage1_epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut traces = Vec::with_capacity(epochs);

    for t in 0..epochs {
        let alpha = stage1_alpha(config, t);
        let lr = cosine_lr(t as f64, epochs as f64, config.lr, config.lr_min)?;
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = gather(train.features(), batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let cache = model.forward_batch(&x);
            let out = batch_loss(&cache.logits, &y, |_, z, label| match config.loss {
                StageOneLoss::CrossEntropy => cross_entropy(z, label),
                _ => gra_loss(z, label, &log_priors, alpha),
            });
            if !out.loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "stage one",
                    epoch: t,
                    message: format!("batch loss is {}", out.loss),
                });
            }
            total += out.loss * batch.len() as f64;
            let grads = model.backward(&cache, &out.grad);
            sgd_step(&mut model, &mut opt, &Gradients::all(&grads), lr)?;
        }
        let val_acc = {
            let f = model.features(val.features());
            classifier_accuracy(&model.classifier, &f, val.labels(), &groups).overall
        };
        log::debug!("stage one epoch {t}: loss {:.4}, alpha {alpha:.4}, val {val_acc:.4}", total / train.len() as f64);
        traces.push(EpochTrace {
            epoch: t,
            loss: total / train.len() as f64,
            alpha,
            lr,
            val_accuracy: Some(val_acc),
            generated: 0,
        });
    }

    let f = model.features(val.features());
    let mut report = MetricsReport::from_accuracy(
        "val",
        classifier_accuracy(&model.classifier, &f, val.labels(), &groups),
    );
    report.epochs = traces;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Classifier-only training pass over `pool` in the order given.
///
/// `teacher` holds distillation targets for rows flagged in `kd_rows`.
#[allow(clippy::too_many_arguments)]
fn classifier_epoch(
    classifier: &mut Classifier,
    opt: &mut OptState,
    pool: &Matrix,
    labels: &[usize],
    order: &[usize],
    teacher: Option<&Matrix>,
    kd_rows: &[bool],
    alpha: f64,
    config: &RunConfig,
    lr: f64,
    scales_only: bool,
    stage: &'static str,
    epoch: usize,
) -> Result<f64> {
    let l = classifier.num_classes();
    let mut total = 0.0;
    for batch in order.chunks(config.batch_size) {
        let x = gather(pool, batch);
        let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let mask: Vec<bool> = batch.iter().map(|&i| kd_rows[i]).collect();
        let t_batch = match teacher {
            Some(t) if mask.iter().any(|&m| m) => {
                let mut tb = Matrix::zeros(batch.len(), l);
                for (r, &i) in batch.iter().enumerate() {
                    if kd_rows[i] {
                        tb.row_mut(r).copy_from_slice(t.row(i));
                    }
                }
                Some(tb)
            }
            _ => None,
        };
        let (raw, logits) = classifier.forward_batch(&x);
        let mask = if t_batch.is_some() { mask } else { vec![false; batch.len()] };
        let out = stage2_loss(&logits, &y, t_batch.as_ref(), alpha, &mask, config.kd_temperature)?;
        if !out.loss.is_finite() {
            return Err(Error::Divergence {
                stage,
                epoch,
                message: format!("batch loss is {}", out.loss),
            });
        }
        total += out.loss * batch.len() as f64;
        let (grads, _) = classifier.backward_batch(&x, &raw, &out.grad);
        let grads = if scales_only {
            Gradients::masked(&grads, |i| i == 2)
        } else {
            Gradients::all(&grads)
        };
        sgd_step(classifier, opt, &grads, lr)?;
        classifier.clamp_scales();
    }
    Ok(total / order.len().max(1) as f64)
}

/// Everything stage two derives once from the frozen stage-one model.
struct FrozenView {
    train_features: Matrix,
    val_features: Matrix,
    teacher: Option<Matrix>,
    groups: GroupAssignment,
    plan: GenerationPlan,
}

fn generate_epoch(
    view: &FrozenView,
    transformed: &Matrix,
    by_class: &[Vec<usize>],
    stats: &crate::afg::ClassStats,
    betas: &BetaState,
    config: &RunConfig,
    epoch: usize,
) -> Result<GeneratedFeatures> {
    let d = transformed.cols();
    let parts = (0..by_class.len())
        .into_par_iter()
        .map(|k| {
            let rows = gather(transformed, &by_class[k]);
            let mut rng = Rng::derive(config.seed, generation_stream(epoch, k));
            generate_for_class(
                k,
                &view.plan,
                &rows,
                &by_class[k],
                stats,
                betas,
                config.gamma,
                config.k_support,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gen = GeneratedFeatures::concat(parts, d);
    // Back from the transformed space to the space the classifier reads.
    for r in 0..gen.features.rows() {
        let back = inverse_tukey(gen.features.row(r), config.lambda);
        gen.features.row_mut(r).copy_from_slice(&back);
    }
    Ok(gen)
}

/// Stage-two run history beyond the metrics report.
#[derive(Debug, Clone)]
pub struct Stage2Extras {
    pub plan: Option<GenerationPlan>,
    pub betas: Option<BetaState>,
    /// Synthetic features of the last epoch, in feature space.
    pub last_generated: Option<GeneratedFeatures>,
}

/// Freezes the feature model of `m1` and retrains its classifier.
pub fn train_stage2(
    m1: &ModelParams,
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    config: &RunConfig,
) -> Result<(ModelParams, MetricsReport)> {
    train_stage2_detailed(m1, train, val, config).map(|(m, r, _)| (m, r))
}

pub fn train_stage2_detailed(
    m1: &ModelParams,
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    config: &RunConfig,
) -> Result<(ModelParams, MetricsReport, Stage2Extras)> {
    config.validate()?;
    m1.validate()?;
    check_same_classes(train, val, "validation")?;
    if m1.input_dim() != train.dim() || m1.num_classes() != train.num_classes() {
        return Err(Error::contract(format!(
            "model maps {} inputs to {} classes, data has dimension {} and {} classes",
            m1.input_dim(),
            m1.num_classes(),
            train.dim(),
            train.num_classes()
        )));
    }
    let start = Instant::now();
    let l = train.num_classes();
    let counts = train.class_counts();
    let target = config
        .target
        .unwrap_or_else(|| counts.iter().copied().max().unwrap_or(0));
    let train_features = m1.features(train.features());
    let teacher = config
        .kd
        .then(|| m1.classifier.forward_batch(&train_features).1);
    let view = FrozenView {
        val_features: m1.features(val.features()),
        teacher,
        groups: groups_for(train, config)?,
        plan: build_generation_plan(counts, target, config.cap),
        train_features,
    };
    let n_real = train.len();
    let by_class = train.indices_by_class();

    // Features are frozen, so the class statistics are fixed for the stage.
    let afg_state = if config.afg {
        let transformed = tukey_transform_rows(&view.train_features, config.lambda)?;
        let stats = estimate_class_stats(&transformed, train.labels(), l)?;
        Some((transformed, stats))
    } else {
        None
    };

    let mut classifier = if config.warm_start {
        m1.classifier.clone()
    } else {
        Classifier::init(m1.feature_dim(), l, &mut Rng::derive(config.seed, STREAM_STAGE2_INIT))
    };
    if config.learnable_scaling {
        classifier.enable_scaling();
    }
    let scales_only = !config.train_classifier_weights;
    let mut opt = OptState::new(&classifier, config.momentum, config.weight_decay);

    let stage1_val = classifier_accuracy(&m1.classifier, &view.val_features, val.labels(), &view.groups);
    let tail: Vec<bool> = (0..l).map(|k| view.plan.is_tail(k)).collect();
    let mut betas = BetaState::new(tail, config.beta_init, config.beta_step)?
        .with_baseline(&stage1_val.per_class_or_zero());

    let mut order_rng = Rng::derive(config.seed, STREAM_STAGE2_ORDER);
    let epochs = config.stage2_epochs;
    let lr_max = config.stage2_peak_lr();
    let mut traces = Vec::with_capacity(epochs);
    let mut trajectory = Vec::with_capacity(epochs);
    let mut last_generated = None;
    let mut last_val: Option<Accuracy> = None;

    for t in 0..epochs {
        let alpha = stage2_alpha(config, t);
        let lr = cosine_lr(t as f64, epochs as f64, lr_max, config.lr_min.min(lr_max))?;

        let generated = match &afg_state {
            Some((transformed, stats)) => {
                Some(generate_epoch(&view, transformed, &by_class, stats, &betas, config, t)?)
            }
            None => None,
        };
        let n_gen = generated.as_ref().map_or(0, GeneratedFeatures::len);

        let (pool, labels) = match &generated {
            Some(g) if n_gen > 0 => {
                let mut data = view.train_features.as_slice().to_vec();
                data.extend_from_slice(g.features.as_slice());
                let mut labels = train.labels().to_vec();
                labels.extend_from_slice(&g.labels);
                (Matrix::from_vec(n_real + n_gen, m1.feature_dim(), data)?, labels)
            }
            _ => (view.train_features.clone(), train.labels().to_vec()),
        };
        let mut order: Vec<usize> = (0..pool.rows()).collect();
        if !config.afg && config.balanced_sampling {
            for (k, idx) in by_class.iter().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                for _ in 0..view.plan.generate[k] {
                    order.push(idx[order_rng.below(idx.len())]);
                }
            }
        }
        order_rng.shuffle(&mut order);

        let kd_rows: Vec<bool> = (0..pool.rows())
            .map(|i| i < n_real && view.groups.is_many(labels[i]))
            .collect();
        let loss = classifier_epoch(
            &mut classifier,
            &mut opt,
            &pool,
            &labels,
            &order,
            view.teacher.as_ref(),
            &kd_rows,
            alpha,
            config,
            lr,
            scales_only,
            "stage two",
            t,
        )?;

        let val_acc = classifier_accuracy(&classifier, &view.val_features, val.labels(), &view.groups);
        if config.afg && config.adapt_beta {
            betas = update_beta(&betas, &val_acc.per_class_or_zero());
        }
        trajectory.push(betas.beta.clone());
        log::debug!("stage two epoch {t}: loss {loss:.4}, kd weight {alpha:.4}, generated {n_gen}, val {:.4}", val_acc.overall);
        traces.push(EpochTrace {
            epoch: t,
            loss,
            alpha,
            lr,
            val_accuracy: Some(val_acc.overall),
            generated: n_gen,
        });
        last_val = Some(val_acc);
        last_generated = generated;
    }

    let m2 = ModelParams {
        layers: m1.layers.clone(),
        classifier,
    };
    let mut report = MetricsReport::from_accuracy("val", last_val.expect("at least one epoch"));
    report.epochs = traces;
    report.beta_trajectory = if config.afg { trajectory } else { Vec::new() };
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    let extras = Stage2Extras {
        plan: config.afg.then(|| view.plan.clone()),
        betas: config.afg.then_some(betas),
        last_generated,
    };
    Ok((m2, report, extras))
}

/// Scores the features of `model`: freezes them, trains a fresh classifier
/// with plain cross-entropy on `balanced_train`, and evaluates on `test`.
pub fn probe_features(
    model: &ModelParams,
    balanced_train: &EmbeddingDataset,
    test: &EmbeddingDataset,
    groups: &GroupAssignment,
    config: &RunConfig,
) -> Result<MetricsReport> {
    config.validate()?;
    check_same_classes(balanced_train, test, "test")?;
    if model.num_classes() != balanced_train.num_classes() || model.input_dim() != balanced_train.dim() {
        return Err(Error::contract("probe data does not match the model's input or label set"));
    }
    if groups.groups.len() != model.num_classes() {
        return Err(Error::contract("group assignment must cover every class"));
    }
    let start = Instant::now();
    let l = model.num_classes();
    let features = model.features(balanced_train.features());
    let mut classifier = Classifier::init(model.feature_dim(), l, &mut Rng::derive(config.seed, STREAM_PROBE_INIT));
    let mut opt = OptState::new(&classifier, config.momentum, config.weight_decay);
    let mut order_rng = Rng::derive(config.seed, STREAM_PROBE_ORDER);
    let epochs = config.probe_epochs;
    let mut order: Vec<usize> = (0..features.rows()).collect();
    let no_kd = vec![false; features.rows()];
    let mut traces = Vec::with_capacity(epochs);
    for t in 0..epochs {
        let lr = cosine_lr(t as f64, epochs as f64, config.lr, config.lr_min)?;
        order_rng.shuffle(&mut order);
        let loss = classifier_epoch(
            &mut classifier,
            &mut opt,
            &features,
            balanced_train.labels(),
            &order,
            None,
            &no_kd,
            0.0,
            config,
            lr,
            false,
            "probe",
            t,
        )?;
        traces.push(EpochTrace {
            epoch: t,
            loss,
            alpha: 0.0,
            lr,
            val_accuracy: None,
            generated: 0,
        });
    }
    let test_features = model.features(test.features());
    let mut report = MetricsReport::from_accuracy(
        "test",
        classifier_accuracy(&classifier, &test_features, test.labels(), groups),
    );
    report.epochs = traces;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// An untrained model of the configured shape; the probe baseline.
pub fn random_feature_model(input_dim: usize, num_classes: usize, config: &RunConfig) -> Result<ModelParams> {
    let arch = Architecture {
        input_dim,
        hidden: config.hidden.clone(),
        num_classes,
    };
    ModelParams::init(&arch, &mut Rng::derive(config.seed, STREAM_RANDOM_FEATURES))
}
