//! Classification metrics and cross-validation reports.

pub mod metrics;

pub use metrics::{
    accuracy, auc_averages, auc_binary, auc_macro, AucAverage, MacroAverage, MetricsReport, MicroAverage,
    WeightedAverage,
};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Mean and sample standard deviation (n − 1) of the finite values.
/// NaN when there are none; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-fold test reports plus their aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub folds: Vec<MetricsReport>,
}

impl CvReport {
    pub fn new(folds: Vec<MetricsReport>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::invalid("report needs at least one fold"));
        }
        Ok(Self { folds })
    }

    fn num_class_columns(&self) -> usize {
        self.folds.iter().map(|f| f.per_class_auc.len()).max().unwrap_or(0)
    }

    pub fn acc(&self) -> (f64, f64) {
        mean_std(&self.folds.iter().map(|f| f.acc).collect::<Vec<_>>())
    }

    pub fn auc(&self) -> (f64, f64) {
        mean_std(&self.folds.iter().map(|f| f.auc).collect::<Vec<_>>())
    }

    fn class_auc(&self, c: usize) -> (f64, f64) {
        let v: Vec<f64> = self
            .folds
            .iter()
            .map(|f| f.per_class_auc.get(c).copied().unwrap_or(f64::NAN))
            .collect();
        mean_std(&v)
    }

    /// `fold,acc,auc[,auc_class_0..]`, one row per fold then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let k = self.num_class_columns();
        let mut out = String::from("fold,acc,auc");
        for c in 0..k {
            let _ = write!(out, ",auc_class_{c}");
        }
        out.push('\n');
        for (i, f) in self.folds.iter().enumerate() {
            let _ = write!(out, "{i},{},{}", f.acc, f.auc);
            for c in 0..k {
                let _ = write!(out, ",{}", f.per_class_auc.get(c).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        let per_class: Vec<(f64, f64)> = (0..k).map(|c| self.class_auc(c)).collect();
        let (acc, auc) = (self.acc(), self.auc());
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let sel = |p: (f64, f64)| if pick == 0 { p.0 } else { p.1 };
            let _ = write!(out, "{label},{},{}", sel(acc), sel(auc));
            for &p in &per_class {
                let _ = write!(out, ",{}", sel(p));
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let k = self.num_class_columns();
        let mut out = format!("{:<6} {:>8} {:>8}", "fold", "ACC", "AUC");
        for c in 0..k {
            let _ = write!(out, " {:>8}", format!("AUC_{c}"));
        }
        out.push('\n');
        for (i, f) in self.folds.iter().enumerate() {
            let _ = write!(out, "{i:<6} {:>8.4} {:>8.4}", f.acc, f.auc);
            for c in 0..k {
                let _ = write!(out, " {:>8.4}", f.per_class_auc.get(c).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        let (acc, auc) = (self.acc(), self.auc());
        let _ = writeln!(out, "{:<6} {:>8.4} {:>8.4}", "mean", acc.0, auc.0);
        let _ = writeln!(out, "{:<6} {:>8.4} {:>8.4}", "std", acc.1, auc.1);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(acc: f64, auc: f64, per: Vec<f64>) -> MetricsReport {
        MetricsReport {
            acc,
            auc,
            per_class_auc: per,
            confusion: vec![],
            n: 4,
        }
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        assert_eq!(mean_std(&[1.0, f64::NAN, 3.0]).0, 2.0);
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn aggregate_is_arithmetic_mean() {
        let folds: Vec<_> = (0..5).map(|i| report(0.5 + 0.1 * i as f64, 0.9, vec![])).collect();
        let r = CvReport::new(folds).unwrap();
        assert!((r.acc().0 - 0.7).abs() < 1e-12);
        assert_eq!(r.auc(), (0.9, 0.0));
    }

    #[test]
    fn csv_layout() {
        let r = CvReport::new(vec![
            report(1.0, 0.75, vec![0.5, 1.0, 0.75]),
            report(0.5, 0.25, vec![0.5, 0.0, 0.25]),
        ])
        .unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "fold,acc,auc,auc_class_0,auc_class_1,auc_class_2");
        assert_eq!(lines[1], "0,1,0.75,0.5,1,0.75");
        assert_eq!(lines[3], "mean,0.75,0.5,0.5,0.5,0.5");
        assert!(lines[4].starts_with("std,0.35355339059327"));
        assert_eq!(lines.len(), 5);
        assert!(r.to_table().contains("mean"));
        assert!(CvReport::new(vec![]).is_err());
    }
}
