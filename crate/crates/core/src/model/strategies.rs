//! Pluggable pieces of the network: projector activation and the attention
//! normalization used to build soft pseudo labels.

use std::sync::{Arc, LazyLock};

use crate::numerics::min_max_normalize;
use crate::registry::{named_trait_object, Named, Registry};

/// Elementwise activation applied after the projector.
pub trait Activation: Named {
    fn apply(&self, x: f64) -> f64;
    /// Derivative with respect to the pre-activation value.
    fn derivative(&self, pre: f64) -> f64;
}
named_trait_object!(Activation);

pub struct Relu;
pub struct Identity;

impl Named for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
}

impl Activation for Relu {
    fn apply(&self, x: f64) -> f64 {
        x.max(0.0)
    }
    fn derivative(&self, pre: f64) -> f64 {
        if pre > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

impl Named for Identity {
    fn name(&self) -> &'static str {
        "none"
    }
}

impl Activation for Identity {
    fn apply(&self, x: f64) -> f64 {
        x
    }
    fn derivative(&self, _pre: f64) -> f64 {
        1.0
    }
}

pub fn activations() -> &'static Registry<dyn Activation> {
    static REG: LazyLock<Registry<dyn Activation>> = LazyLock::new(|| {
        Registry::new("activation")
            .with(Arc::new(Relu) as _)
            .with(Arc::new(Identity) as _)
    });
    &REG
}

/// Maps a bag's softmax attention to per-instance weights in [0, 1].
pub trait PseudoLabelNorm: Named {
    fn normalize(&self, attention: &[f64]) -> Vec<f64>;
}
named_trait_object!(PseudoLabelNorm);

/// Per-bag min-max rescale; a constant bag (including M = 1) maps to all ones.
pub struct MinMax;

/// Softmax attention used as-is.
pub struct SoftmaxRaw;

impl Named for MinMax {
    fn name(&self) -> &'static str {
        "minmax"
    }
}

impl PseudoLabelNorm for MinMax {
    fn normalize(&self, attention: &[f64]) -> Vec<f64> {
        min_max_normalize(attention, 1.0)
    }
}

impl Named for SoftmaxRaw {
    fn name(&self) -> &'static str {
        "softmax-raw"
    }
}

impl PseudoLabelNorm for SoftmaxRaw {
    fn normalize(&self, attention: &[f64]) -> Vec<f64> {
        attention.iter().map(|a| a.clamp(0.0, 1.0)).collect()
    }
}

pub fn normalizations() -> &'static Registry<dyn PseudoLabelNorm> {
    static REG: LazyLock<Registry<dyn PseudoLabelNorm>> = LazyLock::new(|| {
        Registry::new("normalization")
            .with(Arc::new(MinMax) as _)
            .with(Arc::new(SoftmaxRaw) as _)
    });
    &REG
}
