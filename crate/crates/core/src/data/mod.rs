//! Feature bags, manifests, patient-level splits and synthetic data.

pub mod cv;
pub mod manifest;
pub mod synth;
pub mod tpfb;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use cv::{make_cv_splits, train_val_split, CvSplit};
pub use manifest::{load_manifest, Manifest, ManifestEntry};
pub use synth::{generate_synthetic_dataset, SyntheticConfig, SyntheticDataset, SyntheticOracle};
pub use tpfb::{load_feature_bag, write_feature_bag, Coord, TpfbPayload};

/// One slide: M instance feature rows plus identity and bag label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub slide_id: String,
    pub patient_id: String,
    pub label: usize,
    pub features: Matrix,
    pub coords: Option<Vec<Coord>>,
}

impl FeatureBag {
    pub fn num_instances(&self) -> usize {
        self.features.rows()
    }

    /// Copy with instances reordered; output instance `i` is input instance `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> FeatureBag {
        FeatureBag {
            features: self.features.select_rows(order),
            coords: self
                .coords
                .as_ref()
                .map(|c| order.iter().map(|&i| c[i]).collect()),
            ..self.clone()
        }
    }
}

/// Loads every bag listed in the manifest, in manifest order.
pub fn load_bags(manifest: &Manifest) -> Result<Vec<FeatureBag>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let payload = load_feature_bag(&manifest.resolve(e), manifest.feature_dim)?;
            if e.label >= manifest.num_classes() {
                return Err(Error::invalid(format!("label {} out of range", e.label)));
            }
            Ok(FeatureBag {
                slide_id: e.slide_id.clone(),
                patient_id: e.patient_id.clone(),
                label: e.label,
                features: payload.features,
                coords: payload.coords,
            })
        })
        .collect()
}
