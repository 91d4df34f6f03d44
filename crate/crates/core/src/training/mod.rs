//! Optimization, sampling, the training loop and cross-validation.

pub mod cv;
pub mod fit;
pub mod optimizer;
pub mod sampling;

pub use cv::{run_cross_validation, CvOutcome, FoldOutcome};
pub use fit::{evaluate, fit, fit_with_observer, EpochRecord, Evaluation, FitResult, TrainConfig};
pub use optimizer::{adam_step, weight_decays, AdamConfig, AdamState, Coupled, Decoupled, WeightDecay};
pub use sampling::{samplers, weighted_sample_order, BagSampler, ClassBalanced, Shuffle};
