//! Patient-grouped k-fold splitting with a per-fold train/validation split.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::Manifest;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CvSplit {
    pub fold_index: usize,
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

/// Number of validation patients out of `n_rest`: nearest integer to
/// `val_fraction · n_rest`, exact halves going to train, and at least one
/// patient on each side.
pub fn val_patient_count(n_rest: usize, val_fraction: f64) -> usize {
    let want = val_fraction * n_rest as f64;
    let floor = want.floor();
    let n = if want - floor > 0.5 { floor + 1.0 } else { floor } as usize;
    n.clamp(1, n_rest.saturating_sub(1).max(1))
}

pub fn make_cv_splits(
    manifest: &Manifest,
    n_folds: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<CvSplit>> {
    if n_folds < 2 {
        return Err(Error::invalid("n_folds must be at least 2"));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid("val_fraction must lie in (0, 1)"));
    }

    let mut by_patient: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &manifest.entries {
        by_patient.entry(&e.patient_id).or_default().push(&e.slide_id);
    }
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    if patients.len() < n_folds {
        return Err(Error::invalid(format!(
            "{} distinct patients is fewer than {n_folds} folds",
            patients.len()
        )));
    }
    let rest_min = patients.len() - patients.len().div_ceil(n_folds);
    if rest_min < 2 {
        return Err(Error::invalid(
            "need at least 2 non-test patients per fold for a train/validation split",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);

    let slides_of = |ps: &[&str]| -> BTreeSet<String> {
        ps.iter()
            .flat_map(|p| by_patient[p].iter().map(|s| s.to_string()))
            .collect()
    };

    let mut splits = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let test: Vec<&str> = patients
            .iter()
            .enumerate()
            .filter(|(i, _)| i % n_folds == fold)
            .map(|(_, p)| *p)
            .collect();
        let mut rest: Vec<&str> = patients
            .iter()
            .enumerate()
            .filter(|(i, _)| i % n_folds != fold)
            .map(|(_, p)| *p)
            .collect();
        rest.shuffle(&mut rng);
        let n_val = val_patient_count(rest.len(), val_fraction);
        let (val, train) = rest.split_at(n_val);
        splits.push(CvSplit {
            fold_index: fold,
            train_ids: slides_of(train),
            val_ids: slides_of(val),
            test_ids: slides_of(&test),
        });
    }
    Ok(splits)
}

/// Patient-grouped train/validation split with no test set.
/// Returns `(train_slide_ids, val_slide_ids)`.
pub fn train_val_split(
    manifest: &Manifest,
    val_fraction: f64,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid("val_fraction must lie in (0, 1)"));
    }
    let mut by_patient: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &manifest.entries {
        by_patient.entry(&e.patient_id).or_default().push(&e.slide_id);
    }
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    if patients.len() < 2 {
        return Err(Error::invalid("need at least 2 patients for a train/validation split"));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = val_patient_count(patients.len(), val_fraction);
    let collect = |ps: &[&str]| -> BTreeSet<String> {
        ps.iter()
            .flat_map(|p| by_patient[p].iter().map(|s| s.to_string()))
            .collect()
    };
    Ok((collect(&patients[n_val..]), collect(&patients[..n_val])))
}
