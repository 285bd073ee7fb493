//! Exact squared-L2 retrieval over pooled vectors.
//!
//! Distances are squared Euclidean (same ranking as L2, no square roots).
//! Ties are broken by ascending record id, so every query has a unique
//! answer.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedstore::EmbeddingStore;
use crate::error::{Error, Result};
use crate::ids::{ClassId, RecordId, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: RecordId,
    pub class: ClassId,
    /// Squared L2 distance to the query.
    pub distance: f64,
}

#[derive(Debug, Clone)]
struct Bucket {
    ids: Vec<RecordId>,
    /// `ids.len() × depth`, row-major.
    vectors: Vec<f64>,
    active: Vec<bool>,
}

/// Per-class matrices of pooled vectors with an optional active-subset mask.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    depth: usize,
    buckets: Vec<Bucket>,
}

pub fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_distance_then_id(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id))
}

/// Keeps the `k` smallest candidates, sorted.
fn smallest(mut cands: Vec<Neighbor>, k: usize) -> Vec<Neighbor> {
    if k < cands.len() {
        cands.select_nth_unstable_by(k, by_distance_then_id);
        cands.truncate(k);
    }
    cands.sort_by(by_distance_then_id);
    cands
}

impl ClassIndex {
    /// Indexes the pooled vectors of one split of the store.
    pub fn build(store: &EmbeddingStore, split: Split) -> Self {
        let entries = store.split(split).map(|r| (r.id, r.class, r.pooled())).collect();
        Self::from_vectors(store.depth(), store.num_classes(), entries).expect("store records are consistent")
    }

    pub fn from_vectors(depth: usize, num_classes: usize, mut entries: Vec<(RecordId, ClassId, Vec<f64>)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        let mut buckets = vec![
            Bucket {
                ids: Vec::new(),
                vectors: Vec::new(),
                active: Vec::new(),
            };
            num_classes
        ];
        for (id, class, v) in entries {
            if v.len() != depth {
                return Err(Error::dim("index vector", &[depth], &[v.len()]));
            }
            let b = buckets.get_mut(class.index()).ok_or(Error::UnknownClass(class))?;
            if b.ids.last() == Some(&id) {
                return Err(Error::Validation(format!("duplicate id {id} in class {}", class.0)));
            }
            b.ids.push(id);
            b.vectors.extend_from_slice(&v);
            b.active.push(true);
        }
        Ok(ClassIndex { depth, buckets })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_classes(&self) -> usize {
        self.buckets.len()
    }

    /// Active records of a class.
    pub fn class_len(&self, class: ClassId) -> usize {
        self.buckets
            .get(class.index())
            .map_or(0, |b| b.active.iter().filter(|&&a| a).count())
    }

    /// Active records across all classes.
    pub fn len(&self) -> usize {
        (0..self.buckets.len()).map(|c| self.class_len(ClassId(c as u32))).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Active record ids of a class, ascending.
    pub fn class_ids(&self, class: ClassId) -> Vec<RecordId> {
        self.buckets.get(class.index()).map_or_else(Vec::new, |b| {
            b.ids.iter().zip(&b.active).filter(|(_, &a)| a).map(|(&id, _)| id).collect()
        })
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.depth {
            return Err(Error::dim("query", &[self.depth], &[query.len()]));
        }
        Ok(())
    }

    fn candidates(&self, class: usize, query: &[f64], exclude: &[RecordId], out: &mut Vec<Neighbor>) {
        let b = &self.buckets[class];
        for (k, (&id, &active)) in b.ids.iter().zip(&b.active).enumerate() {
            if !active || exclude.contains(&id) {
                continue;
            }
            let v = &b.vectors[k * self.depth..(k + 1) * self.depth];
            out.push(Neighbor {
                id,
                class: ClassId(class as u32),
                distance: squared_l2(query, v),
            });
        }
    }

    /// The `k` nearest non-excluded records of `class`, ascending (ranks 1..=k).
    pub fn nearest_k_in_class(&self, query: &[f64], class: ClassId, k: usize, exclude: &[RecordId]) -> Result<Vec<Neighbor>> {
        self.check_query(query)?;
        if class.index() >= self.buckets.len() {
            return Err(Error::UnknownClass(class));
        }
        let mut cands = Vec::new();
        self.candidates(class.index(), query, exclude, &mut cands);
        if cands.len() < k {
            return Err(Error::InsufficientCandidates {
                class,
                needed: k,
                available: cands.len(),
            });
        }
        Ok(smallest(cands, k))
    }

    /// The `rank`-th nearest (1-based) non-excluded record of `class`.
    pub fn nearest_in_class(&self, query: &[f64], class: ClassId, rank: usize, exclude: &[RecordId]) -> Result<Neighbor> {
        if rank == 0 {
            return Err(Error::Config("neighbor rank starts at 1".into()));
        }
        Ok(*self.nearest_k_in_class(query, class, rank, exclude)?.last().expect("rank >= 1"))
    }

    /// Exact top-`k` over every class, ascending distance.
    pub fn topk_global(&self, query: &[f64], k: usize, exclude: &[RecordId]) -> Result<Vec<Neighbor>> {
        self.check_query(query)?;
        let mut cands = Vec::new();
        for c in 0..self.buckets.len() {
            self.candidates(c, query, exclude, &mut cands);
        }
        if cands.len() < k {
            return Err(Error::Config(format!("k = {k} exceeds the {} retrievable records", cands.len())));
        }
        Ok(smallest(cands, k))
    }

    /// Keeps `⌈fraction × n⌉` active records per class, chosen uniformly by a
    /// generator seeded with `seed`.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<ClassIndex> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("subsample fraction must lie in (0, 1], got {fraction}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for b in out.buckets.iter_mut() {
            let active: Vec<usize> = (0..b.ids.len()).filter(|&i| b.active[i]).collect();
            let n = active.len();
            // Tolerance keeps products like 0.1 × 30 from rounding up to 4.
            let keep = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
            let keep = keep.min(n);
            if keep == n {
                continue;
            }
            b.active.iter_mut().for_each(|a| *a = false);
            for pick in sample(&mut rng, n, keep).into_vec() {
                b.active[active[pick]] = true;
            }
        }
        Ok(out)
    }

    /// Active-record mask per class, in ascending id order.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        self.buckets.iter().map(|b| b.active.clone()).collect()
    }
}
