//! MLP feature model plus a linear classifier, with hand-written backpropagation.
//!
//! Batches are row-major matrices (one sample per row). Every layer stores its
//! weight as `out × in`, so a batch forward is `X · Wᵀ + b`.

mod checkpoint;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{cosine_lr, sgd_step, Gradients, OptState, Parameters};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::None => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Weights uniform in `±1/√fan_in`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self {
            weight: Matrix::from_vec(fan_out, fan_in, data).expect("finite init"),
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }

    fn forward_batch(&self, x: &Matrix) -> Matrix {
        let mut out = affine(x, &self.weight, &self.bias);
        if self.activation == Activation::Relu {
            out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        out
    }
}

/// Linear head `z = s ⊙ (W·f) + b`; `s` is present only in learnable-weight-scaling mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub scale: Option<Vec<f64>>,
}

/// Lower bound enforced on scale factors after each update.
pub const MIN_SCALE: f64 = 1e-6;

impl Classifier {
    pub fn init(feature_dim: usize, num_classes: usize, rng: &mut Rng) -> Self {
        let layer = DenseLayer::init(feature_dim, num_classes, Activation::None, rng);
        Self {
            weight: layer.weight,
            bias: layer.bias,
            scale: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Turns on per-class scaling, starting every factor at 1.
    pub fn enable_scaling(&mut self) {
        if self.scale.is_none() {
            self.scale = Some(vec![1.0; self.num_classes()]);
        }
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        assert_eq!(
            feature.len(),
            self.feature_dim(),
            "classifier expects features of width {}",
            self.feature_dim()
        );
        let mut z = self.weight.matvec(feature);
        if let Some(s) = &self.scale {
            z.iter_mut().zip(s).for_each(|(v, s)| *v *= s);
        }
        z.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        z
    }

    /// Batch forward. Returns `(raw, logits)` where `raw = F·Wᵀ` before scaling and bias.
    pub fn forward_batch(&self, features: &Matrix) -> (Matrix, Matrix) {
        assert_eq!(features.cols(), self.feature_dim(), "classifier input width mismatch");
        let zero = vec![0.0; self.num_classes()];
        let raw = affine(features, &self.weight, &zero);
        let mut logits = raw.clone();
        for r in 0..logits.rows() {
            let row = logits.row_mut(r);
            if let Some(s) = &self.scale {
                row.iter_mut().zip(s).for_each(|(v, s)| *v *= s);
            }
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        (raw, logits)
    }

    /// Gradients of `Σ_b grad_logits[b] · z_b` with respect to classifier parameters,
    /// plus the gradient flowing back into the features.
    pub fn backward_batch(
        &self,
        features: &Matrix,
        raw: &Matrix,
        grad_logits: &Matrix,
    ) -> (ClassifierGrads, Matrix) {
        let (b, l) = (grad_logits.rows(), grad_logits.cols());
        assert_eq!(l, self.num_classes(), "loss gradient width must equal class count");
        assert_eq!(b, features.rows(), "loss gradient rows must equal batch size");

        let mut bias = vec![0.0; l];
        for row in grad_logits.iter_rows() {
            bias.iter_mut().zip(row).for_each(|(a, g)| *a += g);
        }

        let (scale_grad, scaled) = match &self.scale {
            Some(s) => {
                let mut ds = vec![0.0; l];
                let mut scaled = grad_logits.clone();
                for r in 0..b {
                    let g = grad_logits.row(r);
                    let raw_r = raw.row(r);
                    for k in 0..l {
                        ds[k] += g[k] * raw_r[k];
                    }
                    scaled.row_mut(r).iter_mut().zip(s).for_each(|(v, s)| *v *= s);
                }
                (Some(ds), scaled)
            }
            None => (None, grad_logits.clone()),
        };

        let weight = outer_accumulate(&scaled, features);
        let grad_features = scaled.matmul(&self.weight);
        (
            ClassifierGrads {
                weight,
                bias,
                scale: scale_grad,
            },
            grad_features,
        )
    }

    pub fn clamp_scales(&mut self) {
        if let Some(s) = &mut self.scale {
            s.iter_mut().for_each(|v| *v = v.max(MIN_SCALE));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub scale: Option<Vec<f64>>,
}

/// Full decoupled model: feature layers followed by the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<DenseLayer>,
    pub classifier: Classifier,
}

/// Layer widths of the feature model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.input_dim)
    }
}

impl ModelParams {
    /// ReLU MLP with widths `arch.hidden`; the last hidden layer is the feature layer.
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        if arch.hidden.is_empty() {
            return Err(Error::contract("feature model needs at least one layer"));
        }
        if arch.input_dim == 0 || arch.num_classes == 0 || arch.hidden.contains(&0) {
            return Err(Error::contract("layer widths must be positive"));
        }
        let mut layers = Vec::with_capacity(arch.hidden.len());
        let mut fan_in = arch.input_dim;
        for &w in &arch.hidden {
            layers.push(DenseLayer::init(fan_in, w, Activation::Relu, rng));
            fan_in = w;
        }
        let classifier = Classifier::init(fan_in, arch.num_classes, rng);
        Ok(Self { layers, classifier })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self.layers.iter().map(DenseLayer::fan_out).collect(),
            num_classes: self.num_classes(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .first()
            .map_or(self.classifier.feature_dim(), DenseLayer::fan_in)
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    /// Checks that layer shapes chain from the input to the logits and scales are positive.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.fan_in() != width || layer.bias.len() != layer.fan_out() {
                return Err(Error::contract(format!("layer {i} shape does not chain")));
            }
            width = layer.fan_out();
        }
        let c = &self.classifier;
        if c.feature_dim() != width || c.bias.len() != c.num_classes() {
            return Err(Error::contract("classifier shape does not chain"));
        }
        if let Some(s) = &c.scale {
            if s.len() != c.num_classes() || s.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::contract("scale factors must be positive, one per class"));
            }
        }
        Ok(())
    }

    /// Single-sample forward pass: `(feature, logits)`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer
                .weight
                .iter_rows()
                .zip(&layer.bias)
                .map(|(w, b)| layer.activation.apply(dot(w, &h) + b))
                .collect();
        }
        let z = self.classifier.logits(&h);
        (h, z)
    }

    /// Features of every row of `x`.
    pub fn features(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols(), self.input_dim(), "input dimension mismatch");
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward_batch(&h);
        }
        h
    }

    pub fn forward_batch(&self, x: &Matrix) -> ForwardCache {
        assert_eq!(x.cols(), self.input_dim(), "input dimension mismatch");
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward_batch(activations.last().expect("non-empty"));
            activations.push(next);
        }
        let (raw, logits) = self
            .classifier
            .forward_batch(activations.last().expect("non-empty"));
        ForwardCache {
            activations,
            raw,
            logits,
        }
    }

    /// Backpropagates `grad_logits` (batch × L) through the whole model.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix) -> ModelGrads {
        let features = cache.activations.last().expect("non-empty");
        let (classifier, mut upstream) =
            self.classifier
                .backward_batch(features, &cache.raw, grad_logits);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.activations[i + 1];
            let input = &cache.activations[i];
            if layer.activation == Activation::Relu {
                for (g, &o) in upstream.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let mut bias = vec![0.0; layer.fan_out()];
            for row in upstream.iter_rows() {
                bias.iter_mut().zip(row).for_each(|(a, g)| *a += g);
            }
            let weight = outer_accumulate(&upstream, input);
            let next = if i > 0 {
                upstream.matmul(&layer.weight)
            } else {
                Matrix::zeros(0, 0)
            };
            layers.push((weight, bias));
            upstream = next;
        }
        layers.reverse();
        ModelGrads { layers, classifier }
    }
}

/// Intermediate values of a batch forward pass, kept for [`ModelParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by every layer output; the last entry is the feature batch.
    pub activations: Vec<Matrix>,
    pub raw: Matrix,
    pub logits: Matrix,
}

impl ForwardCache {
    pub fn features(&self) -> &Matrix {
        self.activations.last().expect("non-empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
    pub classifier: ClassifierGrads,
}

/// `X · Wᵀ + b` for a batch `X` (B × in) and weight `W` (out × in).
fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    assert_eq!(x.cols(), w.cols(), "affine input width mismatch");
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for r in 0..x.rows() {
        let xr = x.row(r);
        for ((o, wr), bias) in out.row_mut(r).iter_mut().zip(w.iter_rows()).zip(b) {
            *o = dot(wr, xr) + bias;
        }
    }
    out
}

/// `Gᵀ · X`: sums the per-sample outer products `g_b x_bᵀ`, in batch order.
fn outer_accumulate(g: &Matrix, x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(g.cols(), x.cols());
    for b in 0..g.rows() {
        let xb = x.row(b);
        for (o, &gv) in g.row(b).iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            out.row_mut(o)
                .iter_mut()
                .zip(xb)
                .for_each(|(a, &xv)| *a += gv * xv);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(d: usize, hidden: &[usize], l: usize) -> Architecture {
        Architecture {
            input_dim: d,
            hidden: hidden.to_vec(),
            num_classes: l,
        }
    }

    fn zeroed(mut m: ModelParams) -> ModelParams {
        for t in m.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = zeroed(ModelParams::init(&arch(3, &[4, 2], 3), &mut Rng::new(0)).unwrap());
        let (_, z) = m.forward(&[1.0, -2.0, 3.0]);
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn identity_model_is_relu() {
        let m = ModelParams {
            layers: vec![DenseLayer {
                weight: Matrix::identity(3),
                bias: vec![0.0; 3],
                activation: Activation::Relu,
            }],
            classifier: Classifier {
                weight: Matrix::identity(3),
                bias: vec![0.0; 3],
                scale: None,
            },
        };
        let (f, z) = m.forward(&[1.5, -2.0, 0.5]);
        assert_eq!(f, vec![1.5, 0.0, 0.5]);
        assert_eq!(z, vec![1.5, 0.0, 0.5]);
    }

    #[test]
    fn hand_computed_two_layer_forward() {
        // h = relu([[1, -1], [2, 1]]·x + [0, -1]); z = [[1, 2], [-1, 1]]·h + [1, 0]
        // x = (3, 1): pre = (2, 6), h = (2, 6), z = (2 + 12 + 1, -2 + 6) = (15, 4)
        // x = (1, 3): pre = (-2, 4), h = (0, 4), z = (9, 4)
        let m = ModelParams {
            layers: vec![DenseLayer {
                weight: Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 1.0]]),
                bias: vec![0.0, -1.0],
                activation: Activation::Relu,
            }],
            classifier: Classifier {
                weight: Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 1.0]]),
                bias: vec![1.0, 0.0],
                scale: None,
            },
        };
        assert_eq!(m.forward(&[3.0, 1.0]), (vec![2.0, 6.0], vec![15.0, 4.0]));
        assert_eq!(m.forward(&[1.0, 3.0]), (vec![0.0, 4.0], vec![9.0, 4.0]));
        let cache = m.forward_batch(&Matrix::from_rows(&[vec![3.0, 1.0], vec![1.0, 3.0]]));
        assert_eq!(cache.logits, Matrix::from_rows(&[vec![15.0, 4.0], vec![9.0, 4.0]]));
    }

    #[test]
    fn unit_scales_match_unscaled() {
        let mut m = ModelParams::init(&arch(4, &[5, 3], 3), &mut Rng::new(1)).unwrap();
        let x = [0.3, 1.2, -0.7, 2.0];
        let (_, plain) = m.forward(&x);
        m.classifier.enable_scaling();
        let (_, scaled) = m.forward(&x);
        assert_eq!(plain, scaled);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_grads() {
        let m = ModelParams::init(&arch(3, &[4, 2], 3), &mut Rng::new(2)).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.5, 0.0, -1.0]]);
        let cache = m.forward_batch(&x);
        let g = m.backward(&cache, &Matrix::zeros(2, 3));
        for t in g.tensors() {
            assert!(t.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scale_gradient_is_raw_logit_weighted() {
        let mut m = ModelParams::init(&arch(3, &[4], 2), &mut Rng::new(3)).unwrap();
        m.classifier.enable_scaling();
        m.classifier.scale = Some(vec![0.5, 2.0]);
        let x = Matrix::from_rows(&[vec![1.0, 0.2, 0.3], vec![0.1, 0.9, 0.4]]);
        let gl = Matrix::from_rows(&[vec![0.3, -0.3], vec![-0.7, 0.7]]);
        let cache = m.forward_batch(&x);
        let g = m.backward(&cache, &gl);
        let ds = g.classifier.scale.unwrap();
        for k in 0..2 {
            let expected: f64 = (0..2)
                .map(|b| gl[(b, k)] * dot(m.classifier.weight.row(k), cache.features().row(b)))
                .sum();
            assert!((ds[k] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn batch_and_single_forward_agree() {
        let m = ModelParams::init(&arch(5, &[6, 4], 3), &mut Rng::new(4)).unwrap();
        let mut rng = Rng::new(5);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let cache = m.forward_batch(&Matrix::from_rows(&rows));
        for (b, row) in rows.iter().enumerate() {
            let (f, z) = m.forward(row);
            assert_eq!(cache.features().row(b), f.as_slice());
            for (a, c) in cache.logits.row(b).iter().zip(&z) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[should_panic(expected = "input dimension mismatch")]
    fn forward_dimension_mismatch_panics() {
        let m = ModelParams::init(&arch(3, &[4], 2), &mut Rng::new(0)).unwrap();
        m.forward(&[1.0, 2.0]);
    }

    #[test]
    fn validate_catches_bad_scales() {
        let mut m = ModelParams::init(&arch(3, &[4], 2), &mut Rng::new(0)).unwrap();
        assert!(m.validate().is_ok());
        m.classifier.scale = Some(vec![1.0, 0.0]);
        assert!(m.validate().is_err());
    }
}
