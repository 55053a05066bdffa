//! Classification losses and the α schedule.
//!
//! Every loss returns its value together with the gradient with respect to the
//! logits; backpropagation into parameters happens in [`crate::model`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaForm {
    Convex,
    Linear,
    Concave,
}

impl AlphaForm {
    pub fn name(self) -> &'static str {
        match self {
            AlphaForm::Convex => "convex",
            AlphaForm::Linear => "linear",
            AlphaForm::Concave => "concave",
        }
    }
}

impl std::str::FromStr for AlphaForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convex" => Ok(AlphaForm::Convex),
            "linear" => Ok(AlphaForm::Linear),
            "concave" => Ok(AlphaForm::Concave),
            other => Err(Error::contract(format!("unknown alpha form `{other}`"))),
        }
    }
}

/// Shape of the adjustment-strength ramp. All forms rise from 0 at `t = 0`
/// to `s·(c − 1)` at `t = t_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub s: f64,
    pub c: f64,
    pub form: AlphaForm,
    pub t_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            s: 1.0,
            c: 2.0,
            form: AlphaForm::Convex,
            t_max: 1.0,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::contract(format!("schedule scale s = {} must be > 0", self.s)));
        }
        if !(self.c > 1.0) || !self.c.is_finite() {
            return Err(Error::contract(format!("schedule base c = {} must be > 1", self.c)));
        }
        if !(self.t_max > 0.0) {
            return Err(Error::contract("schedule needs t_max > 0"));
        }
        Ok(())
    }

    pub fn with_t_max(self, t_max: f64) -> Self {
        Self { t_max, ..self }
    }

    pub fn final_alpha(&self) -> f64 {
        self.s * (self.c - 1.0)
    }
}

/// Adjustment strength at epoch `t`, with `ep = t / t_max`:
///
/// - convex:  `s·(c^ep − 1)`
/// - linear:  `s·(c − 1)·ep`
/// - concave: `s·(c − 1)·ln(1 + (c − 1)·ep) / ln c`
pub fn alpha_at(spec: &ScheduleSpec, t: f64) -> f64 {
    debug_assert!(t >= 0.0 && t <= spec.t_max, "epoch {t} outside [0, {}]", spec.t_max);
    let ep = (t / spec.t_max).clamp(0.0, 1.0);
    let (s, c) = (spec.s, spec.c);
    match spec.form {
        AlphaForm::Convex => s * (c.powf(ep) - 1.0),
        AlphaForm::Linear => s * (c - 1.0) * ep,
        AlphaForm::Concave => s * (c - 1.0) * (1.0 + (c - 1.0) * ep).ln() / c.ln(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `log p_k − max_j log p_j` for strictly positive priors.
///
/// The constant shift leaves every softmax-based loss unchanged, and makes
/// uniform priors map to exact zeros so the adjusted losses reduce to plain
/// cross-entropy bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPriors(Vec<f64>);

impl LogPriors {
    pub fn new(priors: &[f64]) -> Result<Self> {
        if priors.is_empty() {
            return Err(Error::contract("empty prior vector"));
        }
        if let Some(k) = priors.iter().position(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::contract(format!(
                "prior of class {k} is {}, logit adjustment needs positive priors",
                priors[k]
            )));
        }
        let logs: Vec<f64> = priors.iter().map(|p| p.ln()).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self(logs.into_iter().map(|l| l - max).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `−log softmax(z)[y]`, gradient `softmax(z) − e_y`.
pub fn cross_entropy(logits: &[f64], label: usize) -> LossOutput {
    assert!(label < logits.len(), "label {label} out of range for {} logits", logits.len());
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    LossOutput { loss, grad }
}

/// Cross-entropy on `z + α·log p`; the gradient with respect to `z` is
/// `softmax(z + α·log p) − e_y`.
pub fn gra_loss(logits: &[f64], label: usize, log_priors: &LogPriors, alpha: f64) -> LossOutput {
    assert_eq!(logits.len(), log_priors.len(), "logits and priors differ in length");
    debug_assert!(alpha >= 0.0);
    let adjusted: Vec<f64> = logits
        .iter()
        .zip(log_priors.as_slice())
        .map(|(z, lp)| z + alpha * lp)
        .collect();
    cross_entropy(&adjusted, label)
}

/// Fixed-τ logit adjustment; the same computation as [`gra_loss`] with `α = τ`.
pub fn logit_adjusted_loss(logits: &[f64], label: usize, log_priors: &LogPriors, tau: f64) -> LossOutput {
    gra_loss(logits, label, log_priors, tau)
}

/// `T²·KL(softmax(t/T) ‖ softmax(s/T))`, gradient `T·(softmax(s/T) − softmax(t/T))`.
pub fn kd_loss(student: &[f64], teacher: &[f64], temperature: f64) -> LossOutput {
    assert_eq!(student.len(), teacher.len(), "student and teacher logits differ in length");
    assert!(temperature > 0.0, "temperature must be positive");
    let s: Vec<f64> = student.iter().map(|v| v / temperature).collect();
    let t: Vec<f64> = teacher.iter().map(|v| v / temperature).collect();
    let (lse_s, lse_t) = (log_sum_exp(&s), log_sum_exp(&t));
    let p_t = softmax(&t);
    let p_s = softmax(&s);
    let kl: f64 = p_t
        .iter()
        .zip(s.iter().zip(&t))
        .map(|(&pt, (&si, &ti))| pt * ((ti - lse_t) - (si - lse_s)))
        .sum();
    let grad = p_s
        .iter()
        .zip(&p_t)
        .map(|(ps, pt)| temperature * (ps - pt))
        .collect();
    LossOutput {
        // KL is non-negative; clamp the rounding residue at equal distributions.
        loss: temperature * temperature * kl.max(0.0),
        grad,
    }
}

/// `CE(z, y) + α·1[head]·KD(z, teacher)` for one sample.
pub fn stage2_sample_loss(
    logits: &[f64],
    label: usize,
    teacher: Option<&[f64]>,
    alpha: f64,
    temperature: f64,
) -> LossOutput {
    let mut out = cross_entropy(logits, label);
    if let Some(t) = teacher {
        if alpha != 0.0 {
            let kd = kd_loss(logits, t, temperature);
            out.loss += alpha * kd.loss;
            out.grad
                .iter_mut()
                .zip(&kd.grad)
                .for_each(|(g, k)| *g += alpha * k);
        }
    }
    out
}

/// Settings shared by the loss functions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub log_priors: LogPriors,
    /// τ of the fixed logit-adjustment baseline.
    pub tau: f64,
    pub kd_temperature: f64,
    /// Classes whose samples receive the distillation term.
    pub head: Vec<bool>,
}

impl LossConfig {
    pub fn new(priors: &[f64], tau: f64, kd_temperature: f64, head: Vec<bool>) -> Result<Self> {
        let sum: f64 = priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("priors sum to {sum}, not 1")));
        }
        if !(kd_temperature > 0.0) {
            return Err(Error::contract("distillation temperature must be positive"));
        }
        if head.len() != priors.len() {
            return Err(Error::contract("head mask must cover every class"));
        }
        Ok(Self {
            log_priors: LogPriors::new(priors)?,
            tau,
            kd_temperature,
            head,
        })
    }
}

/// Mean of per-sample losses over a batch; gradient rows carry the `1/B` factor.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub grad: Matrix,
}

/// Averages `per_sample(row, label)` over the batch.
pub fn batch_loss(
    logits: &Matrix,
    labels: &[usize],
    mut per_sample: impl FnMut(usize, &[f64], usize) -> LossOutput,
) -> BatchLoss {
    assert_eq!(logits.rows(), labels.len(), "one label per logit row");
    let b = labels.len();
    let inv = 1.0 / b.max(1) as f64;
    let mut grad = Matrix::zeros(b, logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let out = per_sample(i, logits.row(i), y);
        total += out.loss;
        grad.row_mut(i)
            .iter_mut()
            .zip(&out.grad)
            .for_each(|(g, v)| *g = v * inv);
    }
    BatchLoss {
        loss: total * inv,
        grad,
    }
}

/// Batch version of [`stage2_sample_loss`]. `head_mask[i]` switches distillation
/// on for sample `i`; those samples must have a row in `teacher`.
pub fn stage2_loss(
    logits: &Matrix,
    labels: &[usize],
    teacher: Option<&Matrix>,
    alpha: f64,
    head_mask: &[bool],
    temperature: f64,
) -> Result<BatchLoss> {
    if head_mask.len() != labels.len() {
        return Err(Error::contract("head mask must have one flag per sample"));
    }
    if head_mask.iter().any(|&h| h) {
        match teacher {
            Some(t) if t.rows() == labels.len() && t.cols() == logits.cols() => {}
            Some(_) => return Err(Error::contract("teacher logits shape does not match the batch")),
            None => return Err(Error::contract("head-masked samples need teacher logits")),
        }
    }
    Ok(batch_loss(logits, labels, |i, z, y| {
        let t = if head_mask[i] {
            teacher.map(|t| t.row(i))
        } else {
            None
        };
        stage2_sample_loss(z, y, t, alpha, temperature)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn spec(form: AlphaForm, c: f64) -> ScheduleSpec {
        ScheduleSpec {
            s: 1.0,
            c,
            form,
            t_max: 10.0,
        }
    }

    #[test]
    fn alpha_examples() {
        for form in [AlphaForm::Convex, AlphaForm::Linear, AlphaForm::Concave] {
            assert_eq!(alpha_at(&spec(form, 2.0), 0.0), 0.0);
            assert_eq!(alpha_at(&spec(form, 2.0), 10.0), 1.0);
        }
        let mid = alpha_at(&spec(AlphaForm::Convex, 2.0), 5.0);
        assert!((mid - (2f64.sqrt() - 1.0)).abs() < 1e-12);
        assert_eq!(alpha_at(&spec(AlphaForm::Convex, 4.0), 10.0), 3.0);
    }

    #[test]
    fn alpha_forms_are_ordered() {
        // For c = 2 the convex ramp lies below the line, the concave one above it.
        for i in 1..10 {
            let t = i as f64;
            let cv = alpha_at(&spec(AlphaForm::Convex, 2.0), t);
            let li = alpha_at(&spec(AlphaForm::Linear, 2.0), t);
            let cc = alpha_at(&spec(AlphaForm::Concave, 2.0), t);
            assert!(cv < li && li < cc);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(spec(AlphaForm::Convex, 2.0).validate().is_ok());
        assert!(spec(AlphaForm::Convex, 1.0).validate().is_err());
        let mut s = spec(AlphaForm::Linear, 2.0);
        s.s = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let o = cross_entropy(&[0.0, 0.0], 0);
        assert!((o.loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(o.grad, vec![-0.5, 0.5]);
        assert!(cross_entropy(&[30.0, -30.0], 0).loss < 1e-20);
        let o = cross_entropy(&[1f64.ln(), 3f64.ln()], 1);
        assert!((o.loss - (-(0.75f64).ln())).abs() < 1e-15);
        assert!((o.loss - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn gra_loss_examples() {
        let z = [0.3, -1.2, 2.0];
        let uniform = LogPriors::new(&[1.0 / 3.0; 3]).unwrap();
        assert_eq!(gra_loss(&z, 2, &uniform, 0.7), cross_entropy(&z, 2));
        let skew = LogPriors::new(&[0.7, 0.2, 0.1]).unwrap();
        assert_eq!(gra_loss(&z, 1, &skew, 0.0), cross_entropy(&z, 1));

        let p = LogPriors::new(&[0.9, 0.1]).unwrap();
        let o = gra_loss(&[0.0, 0.0], 1, &p, 1.0);
        assert!((o.loss - 10f64.ln()).abs() < 1e-12);
        assert!((o.loss - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn logit_adjust_examples() {
        let z = [1.0, 0.5, -0.5];
        let p = LogPriors::new(&[0.6, 0.3, 0.1]).unwrap();
        assert_eq!(logit_adjusted_loss(&z, 0, &p, 0.0), cross_entropy(&z, 0));
        let u = LogPriors::new(&[1.0 / 3.0; 3]).unwrap();
        assert_eq!(logit_adjusted_loss(&z, 0, &u, 1.0), cross_entropy(&z, 0));
        assert_eq!(logit_adjusted_loss(&z, 2, &p, 1.3), gra_loss(&z, 2, &p, 1.3));
    }

    #[test]
    fn zero_prior_is_rejected() {
        assert!(LogPriors::new(&[1.0, 0.0]).is_err());
        assert!(LossConfig::new(&[0.5, 0.4], 1.0, 2.0, vec![false; 2]).is_err());
    }

    #[test]
    fn kd_examples() {
        let z = [0.4, -0.3, 1.1];
        let o = kd_loss(&z, &z, 2.0);
        assert_eq!(o.loss, 0.0);
        assert!(o.grad.iter().all(|&g| g == 0.0));

        let o = kd_loss(&[0.0, 0.0], &[3f64.ln(), 1f64.ln()], 1.0);
        let expected = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        assert!((o.loss - expected).abs() < 1e-15);
        assert!((o.loss - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn stage2_examples() {
        let logits = Matrix::from_rows(&[vec![0.2, 1.0, -0.5], vec![1.5, 0.1, 0.0]]);
        let teacher = Matrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let labels = [0, 2];
        let ce = batch_loss(&logits, &labels, |_, z, y| cross_entropy(z, y));

        let a0 = stage2_loss(&logits, &labels, Some(&teacher), 0.0, &[true, true], 2.0).unwrap();
        assert_eq!(a0, ce);
        let none = stage2_loss(&logits, &labels, None, 0.8, &[false, false], 2.0).unwrap();
        assert_eq!(none, ce);

        let mixed = stage2_loss(&logits, &labels, Some(&teacher), 0.8, &[true, false], 2.0).unwrap();
        let head = cross_entropy(logits.row(0), 0).loss + 0.8 * kd_loss(logits.row(0), teacher.row(0), 2.0).loss;
        let tail = cross_entropy(logits.row(1), 2).loss;
        assert!((mixed.loss - 0.5 * (head + tail)).abs() < 1e-15);

        assert!(stage2_loss(&logits, &labels, None, 0.8, &[true, false], 2.0).is_err());
    }

    fn finite_diff(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
        (0..z.len())
            .map(|j| {
                let mut p = z.to_vec();
                let mut m = z.to_vec();
                p[j] += h;
                m[j] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
        a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= rel * x.abs().max(y.abs()).max(1e-3))
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let l = 2 + rng.below(4);
            let s: Vec<f64> = (0..l).map(|_| 2.0 * rng.normal()).collect();
            let t: Vec<f64> = (0..l).map(|_| 2.0 * rng.normal()).collect();
            let temp = 0.5 + 3.0 * rng.uniform();
            let g = kd_loss(&s, &t, temp).grad;
            let fd = finite_diff(|x| kd_loss(x, &t, temp).loss, &s, 1e-5);
            assert!(close(&g, &fd, 1e-5), "{g:?} vs {fd:?}");
        }
    }

    proptest! {
        #[test]
        fn losses_are_shift_invariant(
            z in proptest::collection::vec(-10.0f64..10.0, 2..6),
            shift in -50.0f64..50.0,
            alpha in 0.0f64..2.0,
        ) {
            let l = z.len();
            let y = l - 1;
            let priors: Vec<f64> = (1..=l).map(|k| k as f64).collect();
            let total: f64 = priors.iter().sum();
            let lp = LogPriors::new(&priors.iter().map(|p| p / total).collect::<Vec<_>>()).unwrap();
            let zs: Vec<f64> = z.iter().map(|v| v + shift).collect();
            prop_assert!((cross_entropy(&z, y).loss - cross_entropy(&zs, y).loss).abs() < 1e-12);
            prop_assert!((gra_loss(&z, y, &lp, alpha).loss - gra_loss(&zs, y, &lp, alpha).loss).abs() < 1e-12);
            let t: Vec<f64> = z.iter().rev().copied().collect();
            prop_assert!((kd_loss(&z, &t, 2.0).loss - kd_loss(&zs, &t, 2.0).loss).abs() < 1e-12);
            let g = gra_loss(&z, y, &lp, alpha).grad;
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn kd_is_non_negative(
            s in proptest::collection::vec(-10.0f64..10.0, 3),
            t in proptest::collection::vec(-10.0f64..10.0, 3),
            temp in 0.1f64..10.0,
        ) {
            prop_assert!(kd_loss(&s, &t, temp).loss >= 0.0);
        }

        #[test]
        fn alpha_is_monotone(form in 0usize..3, c in 1.01f64..10.0, s in 0.1f64..3.0) {
            let form = [AlphaForm::Convex, AlphaForm::Linear, AlphaForm::Concave][form];
            let sp = ScheduleSpec { s, c, form, t_max: 40.0 };
            let mut prev = 0.0;
            for i in 0..=400 {
                let a = alpha_at(&sp, i as f64 * 0.1);
                prop_assert!(a >= prev);
                prev = a;
            }
            prop_assert!((prev - s * (c - 1.0)).abs() < 1e-12 * (1.0 + prev));
        }
    }
}
