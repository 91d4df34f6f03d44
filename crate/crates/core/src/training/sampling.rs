//! Per-epoch bag ordering.

use std::collections::BTreeMap;
use std::sync::{Arc, LazyLock};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::registry::{named_trait_object, Named, Registry};

/// Produces the sequence of bag indices visited in one epoch.
pub trait BagSampler: Named {
    fn order(&self, labels: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>>;
}
named_trait_object!(BagSampler);

/// Every bag once, shuffled.
pub struct Shuffle;
/// N draws with replacement, probability ∝ 1/count(class).
pub struct ClassBalanced;

impl Named for Shuffle {
    fn name(&self) -> &'static str {
        "shuffle"
    }
}

impl BagSampler for Shuffle {
    fn order(&self, labels: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if labels.is_empty() {
            return Err(Error::invalid("cannot sample from an empty dataset"));
        }
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(rng);
        Ok(order)
    }
}

impl Named for ClassBalanced {
    fn name(&self) -> &'static str {
        "weighted"
    }
}

impl BagSampler for ClassBalanced {
    fn order(&self, labels: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if labels.is_empty() {
            return Err(Error::invalid("cannot sample from an empty dataset"));
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in labels {
            *counts.entry(l).or_default() += 1;
        }
        let weights: Vec<f64> = labels.iter().map(|l| 1.0 / counts[l] as f64).collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
        Ok((0..labels.len()).map(|_| dist.sample(rng)).collect())
    }
}

pub fn samplers() -> &'static Registry<dyn BagSampler> {
    static REG: LazyLock<Registry<dyn BagSampler>> = LazyLock::new(|| {
        Registry::new("bag sampler")
            .with(Arc::new(Shuffle) as _)
            .with(Arc::new(ClassBalanced) as _)
    });
    &REG
}

/// Class-balanced draw of `labels.len()` indices with replacement.
pub fn weighted_sample_order(labels: &[usize], seed: u64) -> Result<Vec<usize>> {
    ClassBalanced.order(labels, &mut ChaCha8Rng::seed_from_u64(seed))
}
