//! Desk-scale synthetic datasets with a matching synthetic classifier.
//!
//! Class centroids are axis-aligned. Classes come in groups of
//! `group_size` siblings: class `k` sits at `(s/√2)·e_k`, and every class of
//! group `g` is additionally shifted by `group_separation · e_{c+g}`.
//! Siblings are therefore exactly `s` apart and classes of different groups
//! `√(s² + 2·group_separation²)` apart. Each token of a record is its class
//! centroid plus independent Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::{Corruption, SyntheticClassifier};
use crate::embedstore::{EmbeddingRecord, EmbeddingStore};
use crate::error::{Error, Result};
use crate::ids::{ClassId, RecordId, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub depth: usize,
    pub tokens: usize,
    /// Distance between sibling centroids.
    pub separation: f64,
    pub group_size: usize,
    /// Offset along each group's own axis; 0 puts all classes in one plane.
    pub group_separation: f64,
    pub token_noise: f64,
    pub temperature: f64,
    pub corruption: f64,
    /// Corruption swaps the top class with one of ranks `2..=corruption_pool`.
    pub corruption_pool: usize,
}

impl Default for SyntheticSpec {
    /// The default benchmark: 20 classes, 30 + 30 records per class, D = 64, T = 4.
    fn default() -> Self {
        SyntheticSpec {
            classes: 20,
            train_per_class: 30,
            test_per_class: 30,
            depth: 64,
            tokens: 4,
            separation: 1.0,
            group_size: 4,
            group_separation: 3.0,
            token_noise: 0.4,
            temperature: 2.0,
            corruption: 0.3,
            corruption_pool: 4,
        }
    }
}

impl SyntheticSpec {
    pub fn groups(&self) -> usize {
        self.classes.div_ceil(self.group_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 || self.tokens == 0 {
            return Err(Error::Config("record counts and tokens must be positive".into()));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group size must be positive".into()));
        }
        let axes = self.classes + if self.group_separation > 0.0 { self.groups() } else { 0 };
        if self.depth < axes {
            return Err(Error::Config(format!(
                "infeasible layout: {} classes in {} groups need depth >= {axes}, got {}",
                self.classes,
                self.groups(),
                self.depth
            )));
        }
        for (name, v) in [
            ("separation", self.separation),
            ("group_separation", self.group_separation),
            ("token_noise", self.token_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.separation > 0.0) {
            return Err(Error::Config("separation must be positive".into()));
        }
        Ok(())
    }

    /// Class centroids, `classes × depth`.
    pub fn centroids(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let a = self.separation / std::f64::consts::SQRT_2;
        Ok((0..self.classes)
            .map(|k| {
                let mut c = vec![0.0; self.depth];
                c[k] = a;
                if self.group_separation > 0.0 {
                    c[self.classes + k / self.group_size] = self.group_separation;
                }
                c
            })
            .collect())
    }

    /// Synthetic classifier over this spec's centroids.
    pub fn classifier(&self, seed: u64) -> Result<SyntheticClassifier> {
        let corruption = Corruption {
            rate: self.corruption,
            pool: self.corruption_pool,
            seed,
        };
        SyntheticClassifier::new(self.centroids()?, self.temperature, corruption)
    }
}

/// Generated store plus the centroids used to build it.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub store: EmbeddingStore,
    pub centroids: Vec<Vec<f64>>,
}

/// Generates train then test records, class by class. Record ids are unique
/// across both splits.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    let centroids = spec.centroids()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.token_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut records = Vec::with_capacity(spec.classes * (spec.train_per_class + spec.test_per_class));
    let mut next = 0u32;
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        for (k, centroid) in centroids.iter().enumerate() {
            for _ in 0..per_class {
                let grid: Vec<f32> = (0..spec.tokens)
                    .flat_map(|_| centroid.iter())
                    .map(|&m| (m + noise.sample(&mut rng)) as f32)
                    .collect();
                records.push(EmbeddingRecord::new(
                    RecordId(next),
                    ClassId(k as u32),
                    split,
                    spec.tokens,
                    spec.depth,
                    grid,
                )?);
                next += 1;
            }
        }
    }
    let names = (0..spec.classes).map(|k| format!("class_{k:03}")).collect();
    let store = EmbeddingStore::from_records("synthetic", names, spec.tokens, spec.depth, records)?;
    Ok(SyntheticDataset { store, centroids })
}
