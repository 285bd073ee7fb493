mod common;

use std::collections::BTreeSet;

use pcnn_core::embedstore::{EmbeddingRecord, EmbeddingStore};
use pcnn_core::{ClassId, Error, RecordId, Split};
use proptest::prelude::*;

use common::random_store;

fn brute_force_mean(grid: &[f32], tokens: usize, depth: usize) -> Vec<f64> {
    (0..depth)
        .map(|d| (0..tokens).map(|t| f64::from(grid[t * depth + d])).sum::<f64>() / tokens as f64)
        .collect()
}

#[test]
fn pooled_matches_column_mean_oracle() {
    let store = random_store(4, 5, 5, 7, 9, 3);
    for split in [Split::Train, Split::Test] {
        for r in store.split(split) {
            let oracle = brute_force_mean(r.grid(), 7, 9);
            for (a, b) in r.pooled().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn by_class_partitions_each_split() {
    let store = random_store(6, 4, 3, 2, 3, 8);
    for split in [Split::Train, Split::Test] {
        let all: BTreeSet<RecordId> = store.split(split).map(|r| r.id).collect();
        let mut union = BTreeSet::new();
        let mut total = 0;
        for c in 0..6 {
            let members = store.by_class(split, ClassId(c)).unwrap();
            total += members.len();
            assert!(members.iter().all(|r| r.class == ClassId(c)));
            union.extend(members.iter().map(|r| r.id));
        }
        assert_eq!(total, store.split_len(split));
        assert_eq!(union, all);
    }
}

#[test]
fn saved_store_loads_back_identically() {
    let store = random_store(3, 4, 2, 2, 5, 1);
    let dir = tempfile::tempdir().unwrap();
    let (m, p) = (dir.path().join("store.json"), dir.path().join("store.bin"));
    store.save(&m, &p).unwrap();
    let loaded = EmbeddingStore::load(&m, &p).unwrap();
    assert_eq!(loaded.export(), store.export());
}

#[test]
fn truncated_payload_on_disk_is_rejected() {
    let store = random_store(2, 2, 2, 1, 3, 1);
    let dir = tempfile::tempdir().unwrap();
    let (m, p) = (dir.path().join("s.json"), dir.path().join("s.bin"));
    store.save(&m, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 12]).unwrap();
    match EmbeddingStore::load(&m, &p) {
        Err(Error::Ingestion { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 12),
        other => panic!("expected an ingestion error, got {other:?}"),
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let r = EmbeddingRecord::new(RecordId(0), ClassId(0), Split::Train, 1, 2, vec![0.0, f32::NAN]);
    assert!(matches!(r, Err(Error::Validation(_))));
}

proptest! {
    #[test]
    fn import_export_is_identity(seed in 0u64..10_000, classes in 1usize..5, tokens in 1usize..4, depth in 1usize..6) {
        let store = random_store(classes, 2, 1, tokens, depth, seed);
        let (manifest, payload) = store.export();
        let again = EmbeddingStore::import(manifest.clone(), &payload).unwrap();
        prop_assert_eq!(again.export(), (manifest, payload));
    }

    #[test]
    fn pooled_ignores_token_order(seed in 0u64..10_000, rotate in 0usize..5) {
        let store = random_store(1, 1, 0, 5, 4, seed);
        let r = store.split(Split::Train).next().unwrap();
        let mut rows: Vec<&[f32]> = r.grid().chunks(4).collect();
        rows.rotate_left(rotate);
        rows.swap(0, 4);
        let permuted: Vec<f32> = rows.concat();
        let other = EmbeddingRecord::new(r.id, r.class, r.split, 5, 4, permuted).unwrap();
        for (a, b) in r.pooled().iter().zip(other.pooled()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
