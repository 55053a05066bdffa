use std::f64::consts::PI;

use super::{Classifier, ClassifierGrads, ModelGrads, ModelParams};
use crate::error::{Error, Result};

/// Flat view of a parameter set as an ordered list of tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Parameters for Classifier {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.weight.as_slice(), self.bias.as_slice()];
        if let Some(s) = &self.scale {
            out.push(s);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.weight.as_mut_slice(), self.bias.as_mut_slice()];
        if let Some(s) = &mut self.scale {
            out.push(s);
        }
        out
    }
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out.extend(self.classifier.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.extend(self.classifier.tensors_mut());
        out
    }
}

impl Parameters for ClassifierGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.weight.as_slice(), self.bias.as_slice()];
        if let Some(s) = &self.scale {
            out.push(s);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.weight.as_mut_slice(), self.bias.as_mut_slice()];
        if let Some(s) = &mut self.scale {
            out.push(s);
        }
        out
    }
}

impl Parameters for ModelGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out.extend(self.classifier.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for (w, b) in &mut self.layers {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out.extend(self.classifier.tensors_mut());
        out
    }
}

/// Per-tensor gradients aligned with [`Parameters::tensors`]. `None` marks a
/// frozen tensor: it receives no update and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn all(p: &impl Parameters) -> Self {
        Gradients(p.tensors().into_iter().map(|t| Some(t.to_vec())).collect())
    }

    /// Keeps only the tensors whose index satisfies `trainable`.
    pub fn masked(p: &impl Parameters, trainable: impl Fn(usize) -> bool) -> Self {
        Gradients(
            p.tensors()
                .into_iter()
                .enumerate()
                .map(|(i, t)| trainable(i).then(|| t.to_vec()))
                .collect(),
        )
    }
}

/// Momentum buffers mirroring a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocity: Vec<Vec<f64>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptState {
    pub fn new(params: &impl Parameters, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            momentum,
            weight_decay,
        }
    }
}

/// SGD with momentum and coupled weight decay:
/// `v ← μ·v + g + wd·θ`, `θ ← θ − lr·v`.
///
/// Nothing is modified if any gradient entry is non-finite.
pub fn sgd_step(
    params: &mut impl Parameters,
    opt: &mut OptState,
    grads: &Gradients,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::contract(format!("learning rate {lr} must be >= 0")));
    }
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.0.len() || tensors.len() != opt.velocity.len() {
        return Err(Error::contract(format!(
            "{} parameter tensors, {} gradients, {} momentum buffers",
            tensors.len(),
            grads.0.len(),
            opt.velocity.len()
        )));
    }
    for (i, g) in grads.0.iter().enumerate() {
        if let Some(g) = g {
            if g.len() != tensors[i].len() {
                return Err(Error::contract(format!("gradient {i} has the wrong length")));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor: i, index: j });
            }
        }
    }
    let (mu, wd) = (opt.momentum, opt.weight_decay);
    for ((theta, v), g) in tensors.iter_mut().zip(&mut opt.velocity).zip(&grads.0) {
        let Some(g) = g else { continue };
        for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = mu * *vi + gi + wd * *t;
            *t -= lr * *vi;
        }
    }
    Ok(())
}

/// Cosine annealing from `eta_max` at `t = 0` down to `eta_min` at `t = t_max`.
pub fn cosine_lr(t: f64, t_max: f64, eta_max: f64, eta_min: f64) -> Result<f64> {
    if !(t_max > 0.0) {
        return Err(Error::contract("cosine schedule needs t_max > 0"));
    }
    if !(0.0..=t_max).contains(&t) {
        return Err(Error::contract(format!("epoch {t} outside [0, {t_max}]")));
    }
    Ok(eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (PI * t / t_max).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn one_param(v: f64) -> Classifier {
        Classifier {
            weight: Matrix::from_rows(&[vec![v]]),
            bias: vec![0.0],
            scale: None,
        }
    }

    fn grads(g: f64) -> Gradients {
        Gradients(vec![Some(vec![g]), Some(vec![0.0])])
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = one_param(1.0);
        let mut opt = OptState::new(&p, 0.9, 5e-4);
        sgd_step(&mut p, &mut opt, &grads(3.0), 0.0).unwrap();
        assert_eq!(p, one_param(1.0));
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = one_param(1.0);
        let mut opt = OptState::new(&p, 0.0, 0.0);
        sgd_step(&mut p, &mut opt, &grads(2.0), 0.25).unwrap();
        assert_eq!(p.weight[(0, 0)], 0.5);
    }

    #[test]
    fn momentum_recursion() {
        let mut p = one_param(0.0);
        let mut opt = OptState::new(&p, 0.9, 0.0);
        let (lr, g) = (0.1, 1.0);
        sgd_step(&mut p, &mut opt, &grads(g), lr).unwrap();
        let first = p.weight[(0, 0)];
        assert!((first - (-lr * g)).abs() < 1e-15);
        sgd_step(&mut p, &mut opt, &grads(g), lr).unwrap();
        let delta = p.weight[(0, 0)] - first;
        assert!((delta - (-lr * 1.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let mut p = one_param(2.0);
        let mut opt = OptState::new(&p, 0.0, 0.5);
        sgd_step(&mut p, &mut opt, &grads(0.0), 0.1).unwrap();
        assert!((p.weight[(0, 0)] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        let mut p = one_param(2.0);
        let mut opt = OptState::new(&p, 0.9, 0.5);
        let g = Gradients(vec![None, Some(vec![1.0])]);
        sgd_step(&mut p, &mut opt, &g, 0.1).unwrap();
        assert_eq!(p.weight[(0, 0)], 2.0);
        assert!((p.bias[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = one_param(1.0);
        let mut opt = OptState::new(&p, 0.9, 0.0);
        let err = sgd_step(&mut p, &mut opt, &grads(f64::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { tensor: 0, index: 0 }));
        assert_eq!(p, one_param(1.0));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0.0, 10.0, 0.1, 0.001).unwrap(), 0.1);
        assert!((cosine_lr(10.0, 10.0, 0.1, 0.001).unwrap() - 0.001).abs() < 1e-15);
        assert!((cosine_lr(5.0, 10.0, 0.1, 0.001).unwrap() - 0.0505).abs() < 1e-15);
        assert!(cosine_lr(0.0, 0.0, 0.1, 0.0).is_err());
    }
}
