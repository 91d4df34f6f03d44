//! Synthetic bags with known instance labels.
//!
//! Each of the K+1 instance classes (K bag classes plus one shared negative
//! class) is an isotropic Gaussian. A bag of class k mixes a sampled fraction
//! of class-k instances with negative instances, so every bag carries both.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::manifest::{Manifest, ManifestEntry};
use crate::data::tpfb::{write_feature_bag, Coord};
use crate::data::FeatureBag;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::registry::{named_trait_object, Named, Registry};

/// Places the K+1 cluster means.
pub trait ClusterLayout: Named {
    /// Returns `n` means in `dim` dimensions, pairwise at least `min_dist` apart.
    fn means(&self, n: usize, dim: usize, min_dist: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>>;
}
named_trait_object!(ClusterLayout);

/// Random orthonormal directions scaled so every pair sits exactly `min_dist` apart.
pub struct Orthogonal;

/// Like [`Orthogonal`] but the first two class means sit `min_dist` apart while
/// every other pair is `far_factor` times further.
pub struct CloseFar {
    pub far_factor: f64,
}

fn random_orthonormal(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for q in &basis {
            let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= p * qi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

impl Named for Orthogonal {
    fn name(&self) -> &'static str {
        "orthogonal"
    }
}

impl ClusterLayout for Orthogonal {
    fn means(&self, n: usize, dim: usize, min_dist: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        if dim >= n {
            let scale = min_dist / 2f64.sqrt();
            return Ok(random_orthonormal(n, dim, rng)
                .into_iter()
                .map(|q| q.into_iter().map(|x| x * scale).collect())
                .collect());
        }
        // Too few dimensions for orthogonality: a regular polygon in the first plane.
        let radius = min_dist / (2.0 * (std::f64::consts::PI / n as f64).sin());
        Ok((0..n)
            .map(|c| {
                let t = 2.0 * std::f64::consts::PI * c as f64 / n as f64;
                let mut m = vec![0.0; dim];
                m[0] = radius * t.cos();
                m[1] = radius * t.sin();
                m
            })
            .collect())
    }
}

impl Named for CloseFar {
    fn name(&self) -> &'static str {
        "close-far"
    }
}

impl ClusterLayout for CloseFar {
    fn means(&self, n: usize, dim: usize, min_dist: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        if n < 3 || dim < n {
            return Err(Error::invalid(
                "close-far layout needs at least 3 clusters and dim >= K+1",
            ));
        }
        let basis = random_orthonormal(n, dim, rng);
        let scale = self.far_factor * min_dist / 2f64.sqrt();
        let mut means: Vec<Vec<f64>> = basis
            .iter()
            .map(|q| q.iter().map(|x| x * scale).collect())
            .collect();
        means[1] = means[0]
            .iter()
            .zip(&basis[1])
            .map(|(m0, q1)| m0 + min_dist * q1)
            .collect();
        Ok(means)
    }
}

pub fn layouts() -> &'static Registry<dyn ClusterLayout> {
    static REG: LazyLock<Registry<dyn ClusterLayout>> = LazyLock::new(|| {
        Registry::new("cluster layout")
            .with(Arc::new(Orthogonal) as _)
            .with(Arc::new(CloseFar { far_factor: 3.0 }) as _)
    });
    &REG
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub n_bags: usize,
    /// Inclusive instance-count range per bag.
    pub instances_per_bag: (usize, usize),
    /// Inclusive fraction range of bag-class instances per bag.
    pub positive_fraction: (f64, f64),
    /// Minimum distance between cluster means, in units of `noise_scale`.
    pub cluster_separation: f64,
    pub noise_scale: f64,
    pub layout: String,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            feature_dim: 64,
            n_bags: 200,
            instances_per_bag: (16, 64),
            positive_fraction: (0.1, 0.3),
            cluster_separation: 4.0,
            noise_scale: 1.0,
            layout: "orthogonal".into(),
            seed: 0,
        }
    }
}

/// Ground-truth instance labels; `negative_index() == K` marks negative instances.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticOracle {
    pub instance_labels: Vec<Vec<usize>>,
    pub means: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub num_classes: usize,
}

impl SyntheticOracle {
    pub fn negative_index(&self) -> usize {
        self.num_classes
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: Manifest,
    pub bags: Vec<FeatureBag>,
    pub oracle: SyntheticOracle,
}

impl SyntheticDataset {
    /// Writes `manifest.csv`, `oracle.csv` and one TPFB file per bag under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (bag, entry) in self.bags.iter().zip(&self.manifest.entries) {
            write_feature_bag(&dir.join(&entry.feature_path), &bag.features, bag.coords.as_deref())?;
        }
        let mut manifest = self.manifest.clone();
        manifest.base_dir = dir.to_path_buf();
        let manifest_path = dir.join("manifest.csv");
        manifest.write(&manifest_path)?;

        let neg = self.oracle.negative_index();
        let mut oracle = String::from("slide_id,instance,label\n");
        for (bag, labels) in self.bags.iter().zip(&self.oracle.instance_labels) {
            for (j, &l) in labels.iter().enumerate() {
                let name = if l == neg { "NEG" } else { &self.manifest.class_names[l] };
                writeln!(oracle, "{},{j},{name}", bag.slide_id).unwrap();
            }
        }
        let oracle_path = dir.join("oracle.csv");
        fs::write(&oracle_path, oracle).map_err(|e| Error::io(&oracle_path, e))?;
        Ok(manifest_path)
    }
}

pub fn generate_synthetic_dataset(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    let k = config.num_classes;
    let d = config.feature_dim;
    let (m_lo, m_hi) = config.instances_per_bag;
    let (f_lo, f_hi) = config.positive_fraction;
    if k < 2 {
        return Err(Error::invalid("synthetic data needs K >= 2"));
    }
    if d < 2 {
        return Err(Error::invalid("synthetic data needs D >= 2"));
    }
    if config.n_bags == 0 {
        return Err(Error::invalid("n_bags must be positive"));
    }
    if !(config.cluster_separation > 0.0) || !(config.noise_scale > 0.0) {
        return Err(Error::invalid("cluster_separation and noise_scale must be > 0"));
    }
    if m_lo > m_hi || f_lo > f_hi {
        return Err(Error::invalid("degenerate range: min > max"));
    }
    if m_lo < 2 {
        return Err(Error::invalid(
            "bags need at least 2 instances to hold both classes",
        ));
    }
    if !(f_lo > 0.0 && f_hi < 1.0) {
        return Err(Error::invalid("positive fraction range must lie inside (0, 1)"));
    }

    let layout = layouts().get(&config.layout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let means = layout.means(k + 1, d, config.cluster_separation * config.noise_scale, &mut rng)?;
    let class_names: Vec<String> = (0..k).map(|c| format!("C{c}")).collect();

    let mut bags = Vec::with_capacity(config.n_bags);
    let mut entries = Vec::with_capacity(config.n_bags);
    let mut instance_labels = Vec::with_capacity(config.n_bags);
    for i in 0..config.n_bags {
        let patient = i / 2;
        let label = patient % k;
        let m = rng.random_range(m_lo..=m_hi);
        let lo = ((f_lo * m as f64).ceil() as usize).max(1);
        let hi = ((f_hi * m as f64).floor() as usize).min(m - 1);
        let n_pos = if lo <= hi {
            rng.random_range(lo..=hi)
        } else {
            ((0.5 * (f_lo + f_hi) * m as f64).round() as usize).clamp(1, m - 1)
        };
        let mut labels: Vec<usize> = (0..m).map(|j| if j < n_pos { label } else { k }).collect();
        labels.shuffle(&mut rng);

        let mut data = Vec::with_capacity(m * d);
        for &l in &labels {
            for &mu in &means[l] {
                let noise: f64 = rng.sample(StandardNormal);
                // Stored as f32 on disk; keep the in-memory copy identical.
                data.push((mu + config.noise_scale * noise) as f32 as f64);
            }
        }
        let width = (m as f64).sqrt().ceil() as i32;
        let coords: Vec<Coord> = (0..m as i32).map(|j| (j % width, j / width)).collect();

        let slide_id = format!("slide_{i:04}");
        let patient_id = format!("patient_{patient:04}");
        entries.push(ManifestEntry {
            slide_id: slide_id.clone(),
            patient_id: patient_id.clone(),
            label,
            feature_path: PathBuf::from(format!("features/{slide_id}.tpfb")),
        });
        bags.push(FeatureBag {
            slide_id,
            patient_id,
            label,
            features: Matrix::from_vec(m, d, data)?,
            coords: Some(coords),
        });
        instance_labels.push(labels);
    }

    Ok(SyntheticDataset {
        manifest: Manifest {
            class_names,
            feature_dim: d,
            entries,
            base_dir: PathBuf::new(),
        },
        bags,
        oracle: SyntheticOracle {
            instance_labels,
            means,
            noise_scale: config.noise_scale,
            num_classes: k,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::euclidean_distance;

    #[test]
    fn positive_fraction_respected() {
        let cfg = SyntheticConfig {
            n_bags: 200,
            seed: 5,
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(ds.bags.len(), 200);
        for (bag, labels) in ds.bags.iter().zip(&ds.oracle.instance_labels) {
            assert_eq!(labels.len(), bag.features.rows());
            let pos = labels.iter().filter(|&&l| l == bag.label).count();
            let neg = labels.iter().filter(|&&l| l == 3).count();
            assert_eq!(pos + neg, labels.len());
            assert!(pos >= 1 && neg >= 1);
            let frac = pos as f64 / labels.len() as f64;
            assert!((0.1..=0.3).contains(&frac), "fraction {frac}");
        }
    }

    #[test]
    fn means_are_separated() {
        for layout in ["orthogonal", "close-far"] {
            let cfg = SyntheticConfig {
                layout: layout.into(),
                n_bags: 4,
                ..Default::default()
            };
            let ds = generate_synthetic_dataset(&cfg).unwrap();
            let mu = &ds.oracle.means;
            for a in 0..mu.len() {
                for b in a + 1..mu.len() {
                    assert!(euclidean_distance(&mu[a], &mu[b]).unwrap() >= 4.0 - 1e-9);
                }
            }
        }
        // Low-dimensional fallback.
        let cfg = SyntheticConfig {
            feature_dim: 2,
            n_bags: 2,
            ..Default::default()
        };
        let mu = generate_synthetic_dataset(&cfg).unwrap().oracle.means;
        for a in 0..mu.len() {
            for b in a + 1..mu.len() {
                assert!(euclidean_distance(&mu[a], &mu[b]).unwrap() >= 4.0 - 1e-9);
            }
        }
    }

    #[test]
    fn close_far_geometry() {
        let cfg = SyntheticConfig {
            layout: "close-far".into(),
            n_bags: 2,
            ..Default::default()
        };
        let mu = generate_synthetic_dataset(&cfg).unwrap().oracle.means;
        let close = euclidean_distance(&mu[0], &mu[1]).unwrap();
        assert!((close - 4.0).abs() < 1e-9);
        assert!(euclidean_distance(&mu[0], &mu[2]).unwrap() > 2.0 * close);
        assert!(euclidean_distance(&mu[1], &mu[2]).unwrap() > 2.0 * close);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let bad = [
            SyntheticConfig { cluster_separation: 0.0, ..Default::default() },
            SyntheticConfig { instances_per_bag: (10, 5), ..Default::default() },
            SyntheticConfig { positive_fraction: (0.4, 0.2), ..Default::default() },
            SyntheticConfig { num_classes: 1, ..Default::default() },
            SyntheticConfig { layout: "spiral".into(), ..Default::default() },
        ];
        for cfg in bad {
            assert!(generate_synthetic_dataset(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn fixed_seed_gives_identical_files() {
        let cfg = SyntheticConfig {
            n_bags: 12,
            seed: 9,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&cfg).unwrap().write(a.path()).unwrap();
        generate_synthetic_dataset(&cfg).unwrap().write(b.path()).unwrap();
        for rel in ["manifest.csv", "oracle.csv", "features/slide_0000.tpfb", "features/slide_0011.tpfb"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
    }

    #[test]
    fn class_means_converge() {
        // Empirical mean of each instance class within 3 standard errors per coordinate.
        let cfg = SyntheticConfig {
            num_classes: 2,
            feature_dim: 4,
            n_bags: 400,
            seed: 3,
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let mut sums = vec![vec![0.0; 4]; 3];
        let mut counts = vec![0usize; 3];
        for (bag, labels) in ds.bags.iter().zip(&ds.oracle.instance_labels) {
            for (j, &l) in labels.iter().enumerate() {
                counts[l] += 1;
                for (s, x) in sums[l].iter_mut().zip(bag.features.row(j)) {
                    *s += x;
                }
            }
        }
        for c in 0..3 {
            let se = 1.0 / (counts[c] as f64).sqrt();
            for t in 0..4 {
                let emp = sums[c][t] / counts[c] as f64;
                assert!((emp - ds.oracle.means[c][t]).abs() < 3.0 * se + 1e-6, "class {c} dim {t}");
            }
        }
    }
}
