use std::cmp::Ordering;
use std::sync::{Arc, LazyLock};

use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix};
use crate::registry::{named_trait_object, Named, Registry};

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy of an empty prediction set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "accuracy",
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mann–Whitney AUC: the probability a random positive outscores a random
/// negative, ties counting one half.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::DimensionMismatch {
            context: "auc_binary",
            expected: positive.len(),
            actual: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined(format!(
            "need both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // Sum of (1-based, tie-averaged) ranks of the positives, kept doubled so it stays integral.
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share the average (i + 1 + j) / 2.
        let doubled_avg = (i + 1 + j) as u64;
        let pos_in_group = order[i..j].iter().filter(|&&k| positive[k]).count() as u64;
        doubled_rank_sum += doubled_avg * pos_in_group;
        i = j;
    }
    let n_pos = n_pos as u64;
    let doubled_u = doubled_rank_sum - n_pos * (n_pos + 1);
    Ok(doubled_u as f64 / (2 * n_pos * n_neg as u64) as f64)
}

fn check_probs(probabilities: &Matrix, labels: &[usize]) -> Result<()> {
    if probabilities.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "probabilities",
            expected: labels.len(),
            actual: probabilities.rows(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= probabilities.cols()) {
        return Err(Error::invalid(format!("label {l} out of range")));
    }
    Ok(())
}

fn one_vs_rest(probabilities: &Matrix, labels: &[usize], class: usize) -> Result<f64> {
    let scores: Vec<f64> = probabilities.row_iter().map(|r| r[class]).collect();
    let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
    auc_binary(&scores, &positive)
}

fn missing_classes(labels: &[usize], k: usize) -> Vec<usize> {
    (0..k).filter(|c| !labels.contains(c)).collect()
}

/// Unweighted mean of one-vs-rest AUCs; every class must be present.
pub fn auc_macro(probabilities: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_probs(probabilities, labels)?;
    let k = probabilities.cols();
    let missing = missing_classes(labels, k);
    if !missing.is_empty() {
        return Err(Error::AucUndefined(format!("classes {missing:?} absent from labels")));
    }
    let per_class = (0..k)
        .map(|c| one_vs_rest(probabilities, labels, c))
        .collect::<Result<Vec<_>>>()?;
    Ok((per_class.iter().sum::<f64>() / k as f64, per_class))
}

/// Multi-class AUC averaging scheme.
pub trait AucAverage: Named {
    /// Returns the averaged AUC and the per-class one-vs-rest AUCs.
    fn average(&self, probabilities: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)>;
}
named_trait_object!(AucAverage);

pub struct MacroAverage;
pub struct MicroAverage;
pub struct WeightedAverage;

impl Named for MacroAverage {
    fn name(&self) -> &'static str {
        "macro"
    }
}

impl AucAverage for MacroAverage {
    fn average(&self, probabilities: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        auc_macro(probabilities, labels)
    }
}

impl Named for MicroAverage {
    fn name(&self) -> &'static str {
        "micro"
    }
}

impl AucAverage for MicroAverage {
    /// Pools every (sample, class) cell into one binary problem.
    fn average(&self, probabilities: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (_, per_class) = auc_macro(probabilities, labels)?;
        let k = probabilities.cols();
        let mut scores = Vec::with_capacity(labels.len() * k);
        let mut positive = Vec::with_capacity(labels.len() * k);
        for (row, &l) in probabilities.row_iter().zip(labels) {
            for (c, &p) in row.iter().enumerate() {
                scores.push(p);
                positive.push(c == l);
            }
        }
        Ok((auc_binary(&scores, &positive)?, per_class))
    }
}

impl Named for WeightedAverage {
    fn name(&self) -> &'static str {
        "weighted"
    }
}

impl AucAverage for WeightedAverage {
    /// One-vs-rest AUCs weighted by class prevalence.
    fn average(&self, probabilities: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (_, per_class) = auc_macro(probabilities, labels)?;
        let n = labels.len() as f64;
        let avg = per_class
            .iter()
            .enumerate()
            .map(|(c, auc)| auc * labels.iter().filter(|&&l| l == c).count() as f64 / n)
            .sum();
        Ok((avg, per_class))
    }
}

pub fn auc_averages() -> &'static Registry<dyn AucAverage> {
    static REG: LazyLock<Registry<dyn AucAverage>> = LazyLock::new(|| {
        Registry::new("AUC averaging")
            .with(Arc::new(MacroAverage) as _)
            .with(Arc::new(MicroAverage) as _)
            .with(Arc::new(WeightedAverage) as _)
    });
    &REG
}

/// Bag-level classification metrics for one evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    /// NaN when AUC is undefined for the set (fewer than two classes present).
    pub auc: f64,
    /// Per-class one-vs-rest AUC; empty for binary problems.
    pub per_class_auc: Vec<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

impl MetricsReport {
    /// Builds a report from class probabilities.
    ///
    /// Binary problems score the class-1 column. With K > 2 the averaging
    /// strategy applies; classes absent from `labels` are left out of the
    /// average and their per-class AUC is NaN.
    pub fn from_probabilities(
        probabilities: &Matrix,
        labels: &[usize],
        averaging: &dyn AucAverage,
    ) -> Result<Self> {
        check_probs(probabilities, labels)?;
        let k = probabilities.cols();
        let predictions: Vec<usize> = probabilities.row_iter().map(argmax).collect();
        let acc = accuracy(&predictions, labels)?;
        let mut confusion = vec![vec![0usize; k]; k];
        for (&p, &l) in predictions.iter().zip(labels) {
            confusion[l][p] += 1;
        }

        let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
        let (auc, per_class_auc) = if present.len() < 2 {
            (f64::NAN, if k > 2 { vec![f64::NAN; k] } else { Vec::new() })
        } else if k == 2 {
            (one_vs_rest(probabilities, labels, 1)?, Vec::new())
        } else if present.len() == k {
            averaging.average(probabilities, labels)?
        } else {
            // Restrict to present classes, renormalizing nothing: one-vs-rest is per column.
            let sub = Matrix::from_rows(
                &probabilities
                    .row_iter()
                    .map(|r| present.iter().map(|&c| r[c]).collect())
                    .collect::<Vec<Vec<f64>>>(),
            )?;
            let remapped: Vec<usize> = labels
                .iter()
                .map(|l| present.iter().position(|c| c == l).unwrap())
                .collect();
            let (avg, sub_per) = averaging.average(&sub, &remapped)?;
            let mut per = vec![f64::NAN; k];
            for (i, &c) in present.iter().enumerate() {
                per[c] = sub_per[i];
            }
            (avg, per)
        };
        Ok(Self {
            acc,
            auc,
            per_class_auc,
            confusion,
            n: labels.len(),
        })
    }
}
