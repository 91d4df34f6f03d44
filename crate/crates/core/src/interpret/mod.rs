//! Per-patch score maps, the prototype distance matrix and PPM rendering.

pub mod raster;

pub use raster::render_heatmap;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::{Arc, LazyLock};

use crate::data::{Coord, FeatureBag};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, ModelParams};
use crate::numerics::{euclidean_distance, min_max_normalize};
use crate::registry::{named_trait_object, Named, Registry};

/// Display score used when every raw value in a slide is equal.
pub const DEGENERATE_SCORE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchScore {
    pub x: i32,
    pub y: i32,
    pub raw: f64,
    /// In [0, 1]; 1 is the strongest evidence.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchScoreMap {
    pub slide_id: String,
    pub mode: &'static str,
    pub entries: Vec<PatchScore>,
}

impl PatchScoreMap {
    /// `x,y,raw_value,normalized_score` preceded by a `#` comment line.
    pub fn to_csv(&self, checkpoint_sha256: &str) -> String {
        let mut out = format!(
            "# slide={} mode={} checkpoint_sha256={}\nx,y,raw_value,normalized_score\n",
            self.slide_id, self.mode, checkpoint_sha256
        );
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{}", e.x, e.y, e.raw, e.score);
        }
        out
    }

    pub fn write_csv(&self, path: &Path, checkpoint_sha256: &str) -> Result<()> {
        fs::write(path, self.to_csv(checkpoint_sha256)).map_err(|e| Error::io(path, e))
    }
}

/// Turns one forward trace into per-patch raw values and display scores.
pub trait PatchScorer: Named {
    fn score(&self, trace: &ForwardTrace) -> Result<(Vec<f64>, Vec<f64>)>;
}
named_trait_object!(PatchScorer);

/// Min-max normalized attention weights.
pub struct AttentionScorer;

/// Closeness `1 − minmax(d)` to one prototype.
pub struct DistanceScorer {
    pub name: &'static str,
    pub target: DistanceTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceTarget {
    PredictedClass,
    Negative,
}

impl Named for AttentionScorer {
    fn name(&self) -> &'static str {
        "attention"
    }
}

impl PatchScorer for AttentionScorer {
    fn score(&self, trace: &ForwardTrace) -> Result<(Vec<f64>, Vec<f64>)> {
        let scores = min_max_normalize(&trace.a, DEGENERATE_SCORE);
        Ok((trace.a.clone(), scores))
    }
}

impl Named for DistanceScorer {
    fn name(&self) -> &'static str {
        self.name
    }
}

impl PatchScorer for DistanceScorer {
    fn score(&self, trace: &ForwardTrace) -> Result<(Vec<f64>, Vec<f64>)> {
        let pt = trace
            .prototype
            .as_ref()
            .ok_or_else(|| Error::invalid("distance heatmaps need the prototype module"))?;
        let col = match self.target {
            DistanceTarget::PredictedClass => trace.prediction(),
            DistanceTarget::Negative => pt.d.cols() - 1,
        };
        let raw: Vec<f64> = pt.d.row_iter().map(|r| r[col]).collect();
        // The degenerate 0.5 maps to itself.
        let scores = min_max_normalize(&raw, DEGENERATE_SCORE)
            .into_iter()
            .map(|s| 1.0 - s)
            .collect();
        Ok((raw, scores))
    }
}

pub fn scorers() -> &'static Registry<dyn PatchScorer> {
    static REG: LazyLock<Registry<dyn PatchScorer>> = LazyLock::new(|| {
        Registry::new("heatmap mode")
            .with(Arc::new(AttentionScorer) as _)
            .with(Arc::new(DistanceScorer {
                name: "dist-pred",
                target: DistanceTarget::PredictedClass,
            }) as _)
            .with(Arc::new(DistanceScorer {
                name: "dist-neg",
                target: DistanceTarget::Negative,
            }) as _)
    });
    &REG
}

/// Scores every patch of `bag` from its forward trace.
pub fn patch_scores(trace: &ForwardTrace, bag: &FeatureBag, scorer: &dyn PatchScorer) -> Result<PatchScoreMap> {
    let coords: &[Coord] = bag
        .coords
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("bag {} has no patch coordinates", bag.slide_id)))?;
    if coords.len() != trace.a.len() {
        return Err(Error::DimensionMismatch {
            context: "patch coordinates",
            expected: trace.a.len(),
            actual: coords.len(),
        });
    }
    let (raw, scores) = scorer.score(trace)?;
    Ok(PatchScoreMap {
        slide_id: bag.slide_id.clone(),
        mode: scorer.name(),
        entries: coords
            .iter()
            .zip(raw.iter().zip(scores))
            .map(|(&(x, y), (&raw, score))| PatchScore { x, y, raw, score })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeDistanceMatrix {
    /// Class names followed by `NEG`.
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl PrototypeDistanceMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("prototype");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.matrix) {
            out.push_str(l);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise Euclidean distances between prototype rows; exactly symmetric.
pub fn prototype_distance_matrix(params: &ModelParams, class_names: &[String]) -> Result<PrototypeDistanceMatrix> {
    let p = &params.prototypes;
    let n = p.rows();
    if class_names.len() + 1 != n {
        return Err(Error::DimensionMismatch {
            context: "class names vs prototypes",
            expected: n - 1,
            actual: class_names.len(),
        });
    }
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean_distance(p.row(i), p.row(j))?;
            matrix[i][j] = d;
            matrix[j][i] = d;
        }
    }
    let mut labels = class_names.to_vec();
    labels.push("NEG".into());
    Ok(PrototypeDistanceMatrix { labels, matrix })
}

/// Rejects score maps with out-of-range scores or repeated coordinates.
pub fn validate_map(map: &PatchScoreMap) -> Result<()> {
    let mut seen = HashSet::new();
    for e in &map.entries {
        if !(0.0..=1.0).contains(&e.score) {
            return Err(Error::invalid(format!("score {} at ({}, {}) outside [0, 1]", e.score, e.x, e.y)));
        }
        if !seen.insert((e.x, e.y)) {
            return Err(Error::invalid(format!("duplicate patch coordinate ({}, {})", e.x, e.y)));
        }
    }
    Ok(())
}
