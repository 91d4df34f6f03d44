use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::strategies::{activations, normalizations, Activation, PseudoLabelNorm};
use crate::numerics::{Matrix, ParamSet};

/// Shape and behaviour of the network.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// K, number of bag classes.
    pub num_classes: usize,
    /// D, input feature width.
    pub feature_dim: usize,
    /// L, projector output width and prototype width.
    pub hidden_dim: usize,
    /// A, gated-attention hidden width.
    pub attention_dim: usize,
    /// τ in softmax(−d/τ).
    pub temperature: f64,
    /// λ weighting the prototype KLD term.
    pub lambda: f64,
    pub prototype_module: bool,
    pub normalization: Arc<dyn PseudoLabelNorm>,
    pub activation: Arc<dyn Activation>,
}

impl PartialEq for ModelConfig {
    fn eq(&self, other: &Self) -> bool {
        self.num_classes == other.num_classes
            && self.feature_dim == other.feature_dim
            && self.hidden_dim == other.hidden_dim
            && self.attention_dim == other.attention_dim
            && self.temperature == other.temperature
            && self.lambda == other.lambda
            && self.prototype_module == other.prototype_module
            && self.normalization.name() == other.normalization.name()
            && self.activation.name() == other.activation.name()
    }
}

impl ModelConfig {
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
            hidden_dim: 512,
            attention_dim: 256,
            temperature: 1.0,
            lambda: 1.0,
            prototype_module: true,
            normalization: normalizations().get("minmax").expect("builtin"),
            activation: activations().get("relu").expect("builtin"),
        }
    }

    pub fn with_dims(mut self, hidden_dim: usize, attention_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self.attention_dim = attention_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.attention_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be > 0"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite and >= 0"));
        }
        Ok(())
    }

    /// Index of the negative prototype, K.
    pub fn negative_index(&self) -> usize {
        self.num_classes
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// D × L
    pub projector_w: Matrix,
    /// 1 × L
    pub projector_b: Matrix,
    /// L × A, tanh branch
    pub attention_v: Matrix,
    /// L × A, sigmoid gate
    pub attention_u: Matrix,
    /// 1 × A
    pub attention_w: Matrix,
    /// L × K
    pub classifier_w: Matrix,
    /// 1 × K
    pub classifier_b: Matrix,
    /// (K+1) × L, rows p_1..p_K then the negative prototype.
    pub prototypes: Matrix,
}

pub const TENSOR_NAMES: [&str; 8] = [
    "projector_w",
    "projector_b",
    "attention_v",
    "attention_u",
    "attention_w",
    "classifier_w",
    "classifier_b",
    "prototypes",
];

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (k, d, l, a) = (
            config.num_classes,
            config.feature_dim,
            config.hidden_dim,
            config.attention_dim,
        );
        Self {
            projector_w: Matrix::zeros(d, l),
            projector_b: Matrix::zeros(1, l),
            attention_v: Matrix::zeros(l, a),
            attention_u: Matrix::zeros(l, a),
            attention_w: Matrix::zeros(1, a),
            classifier_w: Matrix::zeros(l, k),
            classifier_b: Matrix::zeros(1, k),
            prototypes: Matrix::zeros(k + 1, l),
        }
    }

    /// Weights uniform in ±1/√fan_in, biases zero, prototypes uniform in ±1/√L.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let (k, d, l, a) = (
            config.num_classes,
            config.feature_dim,
            config.hidden_dim,
            config.attention_dim,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        Self {
            projector_w: uniform(d, l, inv(d), &mut rng),
            projector_b: Matrix::zeros(1, l),
            attention_v: uniform(l, a, inv(l), &mut rng),
            attention_u: uniform(l, a, inv(l), &mut rng),
            attention_w: uniform(1, a, inv(a), &mut rng),
            classifier_w: uniform(l, k, inv(l), &mut rng),
            classifier_b: Matrix::zeros(1, k),
            prototypes: uniform(k + 1, l, inv(l), &mut rng),
        }
    }

    pub fn named(&self) -> [(&'static str, &Matrix); 8] {
        [
            (TENSOR_NAMES[0], &self.projector_w),
            (TENSOR_NAMES[1], &self.projector_b),
            (TENSOR_NAMES[2], &self.attention_v),
            (TENSOR_NAMES[3], &self.attention_u),
            (TENSOR_NAMES[4], &self.attention_w),
            (TENSOR_NAMES[5], &self.classifier_w),
            (TENSOR_NAMES[6], &self.classifier_b),
            (TENSOR_NAMES[7], &self.prototypes),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 8] {
        [
            (TENSOR_NAMES[0], &mut self.projector_w),
            (TENSOR_NAMES[1], &mut self.projector_b),
            (TENSOR_NAMES[2], &mut self.attention_v),
            (TENSOR_NAMES[3], &mut self.attention_u),
            (TENSOR_NAMES[4], &mut self.attention_w),
            (TENSOR_NAMES[5], &mut self.classifier_w),
            (TENSOR_NAMES[6], &mut self.classifier_b),
            (TENSOR_NAMES[7], &mut self.prototypes),
        ]
    }

    /// True when every tensor has the shape `config` implies.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        self.same_shape(&ModelParams::zeros(config))
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.named()
            .iter()
            .zip(other.named())
            .all(|((_, a), (_, b))| a.shape() == b.shape())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (name, t) in self.named() {
            if !t.is_finite() {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        Ok(())
    }
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        self.named().into_iter().map(|(n, m)| (n, m.data())).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        self.named_mut()
            .into_iter()
            .map(|(n, m)| (n, m.data_mut()))
            .collect()
    }
}
