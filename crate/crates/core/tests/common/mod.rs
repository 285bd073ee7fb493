#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeMap;

use pcnn_core::classifier::{ClassifierOutput, ProbabilityTable};
use pcnn_core::embedstore::{EmbeddingRecord, EmbeddingStore};
use pcnn_core::nnindex::squared_l2;
use pcnn_core::reranker::cosine;
use pcnn_core::{ClassId, RecordId, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Store with uniform random grids. Ids run over train then test, class-major.
pub fn random_store(classes: usize, per_train: usize, per_test: usize, tokens: usize, depth: usize, seed: u64) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut next = 0u32;
    for (split, per) in [(Split::Train, per_train), (Split::Test, per_test)] {
        for c in 0..classes {
            for _ in 0..per {
                let grid: Vec<f32> = (0..tokens * depth).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                records.push(EmbeddingRecord::new(RecordId(next), ClassId(c as u32), split, tokens, depth, grid).unwrap());
                next += 1;
            }
        }
    }
    let names = (0..classes).map(|c| format!("c{c}")).collect();
    EmbeddingStore::from_records("random", names, tokens, depth, records).unwrap()
}

/// Probability table whose row for each record comes from `probs(record)`.
pub fn table_with(store: &EmbeddingStore, split: Split, probs: impl Fn(&EmbeddingRecord) -> Vec<f64>) -> ProbabilityTable {
    let rows = store
        .split(split)
        .map(|r| ClassifierOutput::new(r.id, probs(r)).unwrap())
        .collect();
    ProbabilityTable::new(split, store.num_classes(), rows).unwrap()
}

/// Ranks the true class first and spreads the rest with strictly decreasing mass.
pub fn truth_first(classes: usize) -> impl Fn(&EmbeddingRecord) -> Vec<f64> {
    move |r| ranked_probs(classes, &order_with_first(classes, r.class.index()))
}

/// Random strictly positive distribution per record, seeded by record id.
pub fn random_probs(classes: usize, seed: u64) -> impl Fn(&EmbeddingRecord) -> Vec<f64> {
    move |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(r.id.0) << 20));
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

pub fn order_with_first(classes: usize, first: usize) -> Vec<usize> {
    std::iter::once(first).chain((0..classes).filter(|&c| c != first)).collect()
}

/// Distribution whose descending order is `order`.
pub fn ranked_probs(classes: usize, order: &[usize]) -> Vec<f64> {
    let weights: Vec<f64> = (0..classes).map(|i| (classes - i) as f64).collect();
    let total: f64 = weights.iter().sum();
    let mut probs = vec![0.0; classes];
    for (rank, &c) in order.iter().enumerate() {
        probs[c] = weights[rank] / total;
    }
    probs
}

/// Exhaustive k-nearest scan by pooled L2, cosine rescoring, and the vote
/// order of `knn_classify`: most votes, then higher mean score, then lower id.
pub fn brute_force_knn(store: &EmbeddingStore, query: &EmbeddingRecord, k: usize) -> ClassId {
    let q = query.pooled();
    let mut all: Vec<(f64, RecordId, ClassId, f64)> = store
        .split(Split::Train)
        .filter(|r| r.id != query.id)
        .map(|r| (squared_l2(&q, &r.pooled()), r.id, r.class, cosine(&q, &r.pooled())))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut tally: BTreeMap<ClassId, (usize, f64)> = BTreeMap::new();
    for &(_, _, class, score) in &all[..k] {
        let e = tally.entry(class).or_default();
        e.0 += 1;
        e.1 += score;
    }
    let most = tally.values().map(|v| v.0).max().unwrap();
    let mut best: Option<(ClassId, f64)> = None;
    for (&class, &(n, sum)) in &tally {
        let mean = sum / n as f64;
        if n == most && best.is_none_or(|(_, m)| mean > m) {
            best = Some((class, mean));
        }
    }
    best.unwrap().0
}
