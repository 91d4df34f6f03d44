//! Patient-grouped k-fold cross-validation.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::data::{make_cv_splits, CvSplit, FeatureBag, Manifest};
use crate::error::{Error, Result};
use crate::evaluation::CvReport;
use crate::training::fit::{evaluate, fit, Evaluation, FitResult, TrainConfig};

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub split: CvSplit,
    pub fit: FitResult,
    /// Selected checkpoint scored on the held-out patients.
    pub test: Evaluation,
    pub test_slides: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    pub report: CvReport,
}

fn subset(bags: &[FeatureBag], ids: &BTreeSet<String>) -> Vec<FeatureBag> {
    bags.iter().filter(|b| ids.contains(&b.slide_id)).cloned().collect()
}

/// Fold `i` trains with seed `config.seed + i`; splits use `config.seed`.
/// Folds run concurrently and are reported in fold order.
pub fn run_cross_validation(
    manifest: &Manifest,
    bags: &[FeatureBag],
    config: &TrainConfig,
    n_folds: usize,
    val_fraction: f64,
) -> Result<CvOutcome> {
    if bags.len() != manifest.entries.len() {
        return Err(Error::DimensionMismatch {
            context: "bags vs manifest entries",
            expected: manifest.entries.len(),
            actual: bags.len(),
        });
    }
    let splits = make_cv_splits(manifest, n_folds, val_fraction, config.seed)?;
    let k = manifest.num_classes();
    let folds = splits
        .into_par_iter()
        .map(|split| {
            let train = subset(bags, &split.train_ids);
            let val = subset(bags, &split.val_ids);
            let test = subset(bags, &split.test_ids);
            let fold_cfg = TrainConfig {
                seed: config.seed.wrapping_add(split.fold_index as u64),
                ..config.clone()
            };
            let fit = fit(&train, &val, k, &fold_cfg)?;
            let test_eval = evaluate(&fit.params, &fit.config, &test, config.auc_average.as_ref())?;
            Ok(FoldOutcome {
                test_slides: test.iter().map(|b| b.slide_id.clone()).collect(),
                split,
                fit,
                test: test_eval,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = CvReport::new(folds.iter().map(|f| f.test.report.clone()).collect())?;
    Ok(CvOutcome { folds, report })
}
