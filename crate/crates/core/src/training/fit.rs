//! The epoch loop and validation-based checkpoint selection.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::FeatureBag;
use crate::error::{Error, Result};
use crate::evaluation::{auc_averages, AucAverage, MetricsReport};
use crate::model::{activations, backward, forward, normalizations, Activation, ModelConfig, ModelParams, PseudoLabelNorm};
use crate::numerics::Matrix;
use crate::training::optimizer::{adam_step, weight_decays, AdamConfig, AdamState, WeightDecay};
use crate::training::sampling::{samplers, BagSampler};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub prototype_module: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub temperature: f64,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub normalization: Arc<dyn PseudoLabelNorm>,
    pub activation: Arc<dyn Activation>,
    pub decay: Arc<dyn WeightDecay>,
    /// `shuffle`, or `weighted` for class-balanced sampling.
    pub sampler: Arc<dyn BagSampler>,
    pub auc_average: Arc<dyn AucAverage>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-5,
            epochs: 200,
            lambda: 1.0,
            seed: 0,
            prototype_module: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            temperature: 1.0,
            hidden_dim: 512,
            attention_dim: 256,
            normalization: normalizations().get("minmax").expect("builtin"),
            activation: activations().get("relu").expect("builtin"),
            decay: weight_decays().get("coupled").expect("builtin"),
            sampler: samplers().get("shuffle").expect("builtin"),
            auc_average: auc_averages().get("macro").expect("builtin"),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            decay: self.decay.clone(),
        }
    }

    pub fn model_config(&self, num_classes: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            feature_dim,
            hidden_dim: self.hidden_dim,
            attention_dim: self.attention_dim,
            temperature: self.temperature,
            lambda: self.lambda,
            prototype_module: self.prototype_module,
            normalization: self.normalization.clone(),
            activation: self.activation.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        self.adam().validate()?;
        self.model_config(2, 1).validate()
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "weight_decay = {} ({})", self.weight_decay, self.decay.name())?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "lambda = {}", self.lambda)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "prototype_module = {}", self.prototype_module)?;
        writeln!(f, "adam = beta1 {} beta2 {} eps {}", self.beta1, self.beta2, self.adam_eps)?;
        writeln!(f, "tau = {}", self.temperature)?;
        writeln!(f, "hidden_dim = {}", self.hidden_dim)?;
        writeln!(f, "attention_dim = {}", self.attention_dim)?;
        writeln!(f, "norm = {}", self.normalization.name())?;
        writeln!(f, "activation = {}", self.activation.name())?;
        writeln!(f, "sampler = {}", self.sampler.name())?;
        write!(f, "auc_average = {}", self.auc_average.name())
    }
}

/// Metrics for one epoch. `epoch` counts from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub train_kld: f64,
    pub train_total: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub config: ModelConfig,
    /// Parameters after the selected epoch.
    pub params: ModelParams,
    /// Parameters after the last epoch.
    pub final_params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch with the best validation AUC, earliest on ties.
    pub selected_epoch: usize,
}

impl FitResult {
    pub fn selected(&self) -> &EpochRecord {
        &self.history[self.selected_epoch - 1]
    }

    /// `epoch,train_ce,train_kld,train_total,val_auc,val_acc`
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,train_ce,train_kld,train_total,val_auc,val_acc\n");
        for r in &self.history {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.train_ce, r.train_kld, r.train_total, r.val_auc, r.val_acc
            );
        }
        out
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        fs::write(path, self.log_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Predictions of one parameter set on a bag collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub mean_loss: f64,
    /// n × K class probabilities, in bag order.
    pub probabilities: Matrix,
}

/// Scores every bag. Bags are processed in parallel; results keep bag order.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    bags: &[FeatureBag],
    averaging: &dyn AucAverage,
) -> Result<Evaluation> {
    if bags.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty bag set"));
    }
    let outputs = bags
        .par_iter()
        .map(|b| forward(params, config, &b.features, b.label).map(|(t, l)| (t.probabilities(), l.total)))
        .collect::<Result<Vec<_>>>()?;
    let k = config.num_classes;
    let mut probs = Matrix::zeros(bags.len(), k);
    let mut loss = 0.0;
    for (i, (p, l)) in outputs.iter().enumerate() {
        probs.row_mut(i).copy_from_slice(p);
        loss += l;
    }
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    Ok(Evaluation {
        report: MetricsReport::from_probabilities(&probs, &labels, averaging)?,
        mean_loss: loss / bags.len() as f64,
        probabilities: probs,
    })
}

fn check_bags(bags: &[FeatureBag], k: usize, d: usize, what: &str) -> Result<()> {
    if bags.is_empty() {
        return Err(Error::invalid(format!("{what} set is empty")));
    }
    for b in bags {
        if b.label >= k {
            return Err(Error::invalid(format!("{what} bag {} has label {} >= {k}", b.slide_id, b.label)));
        }
        if b.features.cols() != d {
            return Err(Error::DimensionMismatch {
                context: "bag feature width",
                expected: d,
                actual: b.features.cols(),
            });
        }
    }
    Ok(())
}

fn non_finite(e: &Error) -> bool {
    matches!(e, Error::NonFiniteInput(_) | Error::NonFiniteGradient(_))
}

/// Trains for exactly `config.epochs` epochs and keeps the best-validation-AUC parameters.
pub fn fit(train: &[FeatureBag], val: &[FeatureBag], num_classes: usize, config: &TrainConfig) -> Result<FitResult> {
    fit_with_observer(train, val, num_classes, config, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with_observer(
    train: &[FeatureBag],
    val: &[FeatureBag],
    num_classes: usize,
    config: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    config.validate()?;
    let d = train.first().map(|b| b.features.cols()).unwrap_or(0);
    check_bags(train, num_classes, d, "training")?;
    check_bags(val, num_classes, d, "validation")?;
    let model_cfg = config.model_config(num_classes, d);
    model_cfg.validate()?;

    let adam = config.adam();
    let mut params = ModelParams::init(&model_cfg, config.seed);
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let labels: Vec<usize> = train.iter().map(|b| b.label).collect();

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=config.epochs {
        let order = config.sampler.order(&labels, &mut rng)?;
        let (mut ce, mut kld, mut total) = (0.0, 0.0, 0.0);
        for &i in &order {
            let bag = &train[i];
            let fail = || Error::NonFiniteLoss {
                epoch,
                bag: bag.slide_id.clone(),
            };
            let out = match backward(&params, &model_cfg, &bag.features, bag.label) {
                Ok(o) => o,
                Err(e) if non_finite(&e) => return Err(fail()),
                Err(e) => return Err(e),
            };
            if !out.loss.total.is_finite() {
                return Err(fail());
            }
            ce += out.loss.ce;
            kld += out.loss.kld;
            total += out.loss.total;
            adam_step(&mut params, &out.grads, &mut state, &adam)?;
        }
        let n = order.len() as f64;
        let eval = match evaluate(&params, &model_cfg, val, config.auc_average.as_ref()) {
            Err(e) if non_finite(&e) => {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    bag: "validation".into(),
                })
            }
            r => r?,
        };
        let record = EpochRecord {
            epoch,
            train_ce: ce / n,
            train_kld: kld / n,
            train_total: total / n,
            val_loss: eval.mean_loss,
            val_auc: eval.report.auc,
            val_acc: eval.report.acc,
        };
        observe(&record);
        // NaN AUC (single-class validation set) ranks below everything.
        let score = if record.val_auc.is_nan() { f64::NEG_INFINITY } else { record.val_auc };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, params.clone()));
        }
        history.push(record);
    }
    let (_, selected_epoch, best_params) = best.expect("epochs >= 1");
    Ok(FitResult {
        config: model_cfg,
        params: best_params,
        final_params: params,
        history,
        selected_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};
    use crate::model::Checkpoint;

    fn small_data(seed: u64) -> (Vec<FeatureBag>, Vec<FeatureBag>) {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            feature_dim: 8,
            n_bags: 30,
            instances_per_bag: (4, 10),
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut bags = ds.bags;
        let val = bags.split_off(21);
        (bags, val)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            hidden_dim: 8,
            attention_dim: 4,
            lr: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn runs_every_epoch_and_selects_first_best() {
        let (train, val) = small_data(1);
        let r = fit(&train, &val, 3, &small_cfg()).unwrap();
        assert_eq!(r.history.len(), 4);
        assert_eq!(r.history.iter().map(|h| h.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        let best = r.history.iter().map(|h| h.val_auc).fold(f64::NEG_INFINITY, f64::max);
        let first = r.history.iter().position(|h| h.val_auc == best).unwrap() + 1;
        assert_eq!(r.selected_epoch, first);
        assert_eq!(r.log_csv().lines().count(), 5);
        assert!(r.log_csv().starts_with("epoch,train_ce,train_kld,train_total,val_auc,val_acc\n1,"));
    }

    #[test]
    fn selected_params_reproduce_selected_metrics() {
        let (train, val) = small_data(2);
        let r = fit(&train, &val, 3, &small_cfg()).unwrap();
        let e = evaluate(&r.params, &r.config, &val, small_cfg().auc_average.as_ref()).unwrap();
        assert_eq!(e.report.auc.to_bits(), r.selected().val_auc.to_bits());
        assert_eq!(e.report.acc.to_bits(), r.selected().val_acc.to_bits());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (train, val) = small_data(3);
        let a = fit(&train, &val, 3, &small_cfg()).unwrap();
        let b = fit(&train, &val, 3, &small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = fit(&train, &val, 3, &TrainConfig { seed: 4, ..small_cfg() }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn zero_lambda_matches_baseline() {
        let (train, val) = small_data(4);
        let with = fit(&train, &val, 3, &TrainConfig { lambda: 0.0, ..small_cfg() }).unwrap();
        let without = fit(&train, &val, 3, &TrainConfig { prototype_module: false, ..small_cfg() }).unwrap();
        for (a, b) in with.history.iter().zip(&without.history) {
            assert_eq!(a.train_ce.to_bits(), b.train_ce.to_bits());
            assert_eq!(a.val_auc.to_bits(), b.val_auc.to_bits());
            assert_eq!(b.train_kld, 0.0);
        }
        assert_eq!(with.params.classifier_w, without.params.classifier_w);
        assert_eq!(with.params.projector_w, without.params.projector_w);
    }

    #[test]
    fn repeated_bag_loss_does_not_increase() {
        let (train, _) = small_data(5);
        for bag in train.iter().take(5) {
            let cfg = small_cfg().model_config(3, 8);
            let adam = AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            };
            let mut p = ModelParams::init(&cfg, 9);
            let mut s = AdamState::new(&p);
            let mut last = f64::INFINITY;
            for _ in 0..20 {
                let out = backward(&p, &cfg, &bag.features, bag.label).unwrap();
                assert!(out.loss.total <= last + 1e-9, "{} > {last}", out.loss.total);
                last = out.loss.total;
                adam_step(&mut p, &out.grads, &mut s, &adam).unwrap();
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_metrics() {
        let (train, val) = small_data(6);
        let r = fit(&train, &val, 3, &small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.tpck");
        Checkpoint {
            config: r.config.clone(),
            class_names: vec!["a".into(), "b".into(), "c".into()],
            params: r.params.clone(),
        }
        .save(&path)
        .unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let avg = small_cfg().auc_average;
        let before = evaluate(&r.params, &r.config, &val, avg.as_ref()).unwrap();
        let after = evaluate(&back.params, &back.config, &val, avg.as_ref()).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn non_finite_input_names_epoch_and_bag() {
        let (mut train, val) = small_data(7);
        train[2].features.set(0, 0, f64::NAN);
        let err = fit(&train, &val, 3, &small_cfg()).unwrap_err();
        match &err {
            Error::NonFiniteLoss { epoch, bag } => {
                assert_eq!(*epoch, 1);
                assert_eq!(bag, &train[2].slide_id);
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (train, val) = small_data(8);
        assert!(fit(&train, &[], 3, &small_cfg()).is_err());
        assert!(fit(&train, &val, 2, &small_cfg()).is_err());
        assert!(fit(&train, &val, 3, &TrainConfig { epochs: 0, ..small_cfg() }).is_err());
        assert!(fit(&train, &val, 3, &TrainConfig { lr: 0.0, ..small_cfg() }).is_err());
    }
}
