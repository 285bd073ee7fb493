mod common;

use std::collections::BTreeMap;

use pcnn_core::embedstore::{EmbeddingRecord, EmbeddingStore};
use pcnn_core::nnindex::ClassIndex;
use pcnn_core::pairsampler::{
    balance, pair_count_audit, remove_identical, sample_eval, sample_pairs, sample_train, Label, NegativeMode,
    PairSample, PairSet, SamplerConfig,
};
use pcnn_core::{ClassId, Error, RecordId, Split};
use proptest::prelude::*;

use common::{order_with_first, random_probs, random_store, ranked_probs, table_with, truth_first};

fn config(q: usize, mode: NegativeMode) -> SamplerConfig {
    SamplerConfig {
        q,
        nn_rank: 1,
        negative_mode: mode,
        seed: 42,
    }
}

fn queries(store: &EmbeddingStore, split: Split) -> Vec<(RecordId, ClassId)> {
    store.split(split).map(|r| (r.id, r.class)).collect()
}

/// 5,994 training records over 200 classes: 194 classes of 30 and 6 of 29.
fn cub_sized_store() -> EmbeddingStore {
    let mut records = Vec::new();
    let mut id = 0u32;
    for c in 0..200u32 {
        let n = if c < 194 { 30 } else { 29 };
        for k in 0..n {
            let grid = vec![c as f32, k as f32 * 0.01 + (id % 7) as f32 * 1e-4];
            records.push(EmbeddingRecord::new(RecordId(id), ClassId(c), Split::Train, 1, 2, grid).unwrap());
            id += 1;
        }
    }
    let names = (0..200).map(|c| format!("species_{c}")).collect();
    EmbeddingStore::from_records("cub-sized", names, 1, 2, records).unwrap()
}

#[test]
fn cub_sized_training_set_yields_113886_pairs() {
    let store = cub_sized_store();
    assert_eq!(store.split_len(Split::Train), 5_994);
    let table = table_with(&store, Split::Train, truth_first(200));
    let index = ClassIndex::build(&store, Split::Train);
    let set = sample_train(&store, &table, &index, &config(10, NegativeMode::HardTopQ)).unwrap();
    assert_eq!(set.len(), 113_886);
    assert_eq!(set.len(), 5_994 * 19);
    let audit = pair_count_audit(&set, &queries(&store, Split::Train), &table, 10);
    assert!(audit.ok(), "{:?}", audit.violations);
}

#[test]
fn truth_in_top_q_gives_2q_minus_1_pairs_per_query() {
    let store = random_store(12, 8, 5, 2, 3, 1);
    let index = ClassIndex::build(&store, Split::Train);
    for q in [2, 3, 5, 7] {
        let table = table_with(&store, Split::Test, truth_first(12));
        let set = sample_pairs(&store, Split::Test, &table, &index, &config(q, NegativeMode::HardTopQ)).unwrap();
        let m = store.split_len(Split::Test);
        assert_eq!(set.len(), m * (2 * q - 1));
        assert_eq!(set.positives(), m * q);
        let mut per_query: BTreeMap<RecordId, usize> = BTreeMap::new();
        for p in &set.pairs {
            *per_query.entry(p.query).or_default() += 1;
        }
        assert!(per_query.values().all(|&n| n == 2 * q - 1));
    }
}

#[test]
fn one_query_with_truth_outside_top_q_adds_one_pair() {
    let store = random_store(12, 12, 5, 2, 3, 2);
    let index = ClassIndex::build(&store, Split::Train);
    let outsider = store.split(Split::Test).next().unwrap().id;
    let table = table_with(&store, Split::Test, |r| {
        if r.id == outsider {
            // Truth ranked last.
            let mut order = order_with_first(12, (r.class.index() + 1) % 12);
            order.retain(|&c| c != r.class.index());
            order.push(r.class.index());
            ranked_probs(12, &order)
        } else {
            truth_first(12)(r)
        }
    });
    let q = 10;
    let set = sample_pairs(&store, Split::Test, &table, &index, &config(q, NegativeMode::HardTopQ)).unwrap();
    let m = store.split_len(Split::Test);
    assert_eq!(set.len(), m * (2 * q - 1) + 1);
    let own: Vec<&PairSample> = set.pairs.iter().filter(|p| p.query == outsider).collect();
    assert_eq!(own.len(), 2 * q);
    assert_eq!(own.iter().filter(|p| p.label.is_positive()).count(), q);
    let audit = pair_count_audit(&set, &queries(&store, Split::Test), &table, q);
    assert!(audit.ok(), "{:?}", audit.violations);
    assert_eq!(audit.expected, set.len());
}

#[test]
fn empty_query_split_gives_no_pairs() {
    let store = random_store(4, 5, 0, 1, 2, 3);
    let index = ClassIndex::build(&store, Split::Train);
    let table = table_with(&store, Split::Test, truth_first(4));
    let set = sample_pairs(&store, Split::Test, &table, &index, &config(3, NegativeMode::HardTopQ)).unwrap();
    assert!(set.is_empty());
}

#[test]
fn identical_grids_are_removed_from_evaluation_pairs() {
    // The test record duplicates a training record of its class.
    let mut records = Vec::new();
    for (id, class, split, v) in [
        (0, 0, Split::Train, 1.0),
        (1, 0, Split::Train, 1.5),
        (2, 1, Split::Train, 5.0),
        (3, 1, Split::Train, 5.5),
        (4, 0, Split::Test, 1.0),
    ] {
        records.push(EmbeddingRecord::new(RecordId(id), ClassId(class), split, 1, 1, vec![v]).unwrap());
    }
    let store = EmbeddingStore::from_records("dup", vec!["a".into(), "b".into()], 1, 1, records).unwrap();
    let index = ClassIndex::build(&store, Split::Train);
    let table = table_with(&store, Split::Test, truth_first(2));
    let raw = sample_pairs(&store, Split::Test, &table, &index, &config(2, NegativeMode::HardTopQ)).unwrap();
    assert!(raw.pairs.iter().any(|p| p.neighbor == RecordId(0)));
    let deduped = remove_identical(&store, raw.clone()).unwrap();
    assert_eq!(deduped.len(), raw.len() - 1);
    assert!(deduped.pairs.iter().all(|p| p.neighbor != RecordId(0)));
    let eval = sample_eval(&store, &table, &index, &config(2, NegativeMode::HardTopQ)).unwrap();
    assert_eq!(eval.positives(), eval.negatives());
}

#[test]
fn tiny_class_is_reported_by_name() {
    // Class 2 has only 3 training records; Q = 5 positives cannot be drawn.
    let store = random_store(6, 8, 2, 1, 2, 4);
    let records: Vec<EmbeddingRecord> = store
        .split(Split::Train)
        .chain(store.split(Split::Test))
        .filter(|r| !(r.split == Split::Train && r.class == ClassId(2) && r.id.0 % 8 >= 3))
        .cloned()
        .collect();
    let names = (0..6).map(|c| format!("c{c}")).collect();
    let store = EmbeddingStore::from_records("tiny", names, 1, 2, records).unwrap();
    let index = ClassIndex::build(&store, Split::Train);
    let table = table_with(&store, Split::Train, truth_first(6));
    match sample_train(&store, &table, &index, &config(5, NegativeMode::HardTopQ)) {
        Err(Error::InsufficientCandidates { class, needed, available }) => {
            assert_eq!((class, needed, available), (ClassId(2), 5, 2));
        }
        other => panic!("expected insufficient candidates, got {other:?}"),
    }
}

#[test]
fn jsonl_files_roundtrip() {
    let store = random_store(5, 6, 3, 1, 2, 5);
    let index = ClassIndex::build(&store, Split::Train);
    let table = table_with(&store, Split::Train, random_probs(5, 1));
    let set = sample_train(&store, &table, &index, &config(3, NegativeMode::RandomClass)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    set.write_jsonl(&path).unwrap();
    assert_eq!(PairSet::read_jsonl(&path).unwrap(), set);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampled_sets_satisfy_every_invariant(
        seed in 0u64..10_000,
        q in 2usize..6,
        random_mode: bool,
        train_split: bool,
    ) {
        let store = random_store(7, 7, 4, 2, 3, seed);
        let index = ClassIndex::build(&store, Split::Train);
        let split = if train_split { Split::Train } else { Split::Test };
        let table = table_with(&store, split, random_probs(7, seed));
        let mode = if random_mode { NegativeMode::RandomClass } else { NegativeMode::HardTopQ };
        let cfg = SamplerConfig { seed, ..config(q, mode) };
        let set = sample_pairs(&store, split, &table, &index, &cfg).unwrap();
        prop_assert_eq!(&set, &sample_pairs(&store, split, &table, &index, &cfg).unwrap());

        let audit = pair_count_audit(&set, &queries(&store, split), &table, q);
        prop_assert!(audit.ok(), "{:?}", audit.violations);
        prop_assert_eq!(audit.expected, audit.actual);
        for p in &set.pairs {
            let query = store.get(split, p.query).unwrap();
            let neighbor = store.get(Split::Train, p.neighbor).unwrap();
            prop_assert_ne!(p.query, p.neighbor);
            prop_assert_eq!(neighbor.class, p.class);
            prop_assert_eq!(p.label == Label::Positive, neighbor.class == query.class);
            if !random_mode && p.label == Label::Negative {
                prop_assert!(table.get(p.query).unwrap().top_q(q).unwrap().contains(p.class));
            }
        }
    }

    #[test]
    fn balanced_sets_are_even_and_equal(seed in 0u64..10_000, q in 2usize..6) {
        let store = random_store(7, 7, 4, 2, 3, seed);
        let index = ClassIndex::build(&store, Split::Train);
        let table = table_with(&store, Split::Test, random_probs(7, seed));
        let raw = sample_pairs(&store, Split::Test, &table, &index, &config(q, NegativeMode::HardTopQ)).unwrap();
        let balanced = balance(raw, seed);
        prop_assert_eq!(balanced.positives(), balanced.negatives());
        prop_assert_eq!(balanced.len() % 2, 0);
    }
}
