//! Positive and negative pair construction for training and evaluating the
//! comparator.
//!
//! For each query with classifier top-Q prediction:
//!
//! - positives are the Q nearest training records of the query's own class
//!   (the query itself excluded);
//! - negatives come from every other class in the top-Q (hard mode) or from
//!   uniformly drawn other classes (random mode), represented by their
//!   `nn_rank`-th nearest training record.
//!
//! A query whose true class is in its top-Q therefore yields `Q + (Q − 1)`
//! pairs; otherwise it yields `2Q`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ProbabilityTable;
use crate::embedstore::EmbeddingStore;
use crate::error::{Error, Result};
use crate::ids::{ClassId, RecordId, Split};
use crate::nnindex::ClassIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Negatives from the wrong classes inside the classifier's top-Q.
    HardTopQ,
    /// Negatives from uniformly drawn classes other than the true one.
    RandomClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub q: usize,
    /// Which in-class neighbor (1 = nearest) represents a negative class.
    pub nn_rank: usize,
    pub negative_mode: NegativeMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            q: 10,
            nn_rank: 1,
            negative_mode: NegativeMode::HardTopQ,
            seed: 42,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q < 2 {
            return Err(Error::Config(format!("Q must be at least 2, got {}", self.q)));
        }
        if self.nn_rank == 0 {
            return Err(Error::Config("nn_rank starts at 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn target(self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

/// One (query, neighbor) pair. The query lives in `split`; the neighbor is
/// always a training record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub split: Split,
    pub query: RecordId,
    pub neighbor: RecordId,
    pub label: Label,
    /// Class the neighbor was drawn from.
    pub class: ClassId,
    /// In-class neighbor rank used (1 = nearest).
    pub rank: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PairSample>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.label.is_positive()).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p).map_err(|e| Error::json("pair", e))?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let p = serde_json::from_str(&line).map_err(|e| Error::json(format!("{} line {}", path.display(), n + 1), e))?;
            pairs.push(p);
        }
        Ok(PairSet { pairs })
    }
}

/// Generates pairs for every query of `split`. Neighbors come from `index`,
/// which must be built over the training split.
pub fn sample_pairs(
    store: &EmbeddingStore,
    split: Split,
    table: &ProbabilityTable,
    index: &ClassIndex,
    config: &SamplerConfig,
) -> Result<PairSet> {
    config.validate()?;
    if table.split() != split {
        return Err(Error::Validation(format!(
            "classifier outputs are for the {} split, queries are from {}",
            table.split(),
            split
        )));
    }
    if config.q > store.num_classes() {
        return Err(Error::Config(format!("Q = {} exceeds the {} classes", config.q, store.num_classes())));
    }
    let mut pairs = Vec::new();
    for record in store.split(split) {
        let pooled = record.pooled();
        let exclude: &[RecordId] = if split == Split::Train { std::slice::from_ref(&record.id) } else { &[] };
        let top = table.get(record.id)?.top_q(config.q)?;
        let truth_in_top = top.contains(record.class);

        let positives = index.nearest_k_in_class(&pooled, record.class, config.q, exclude)?;
        for (r, n) in positives.into_iter().enumerate() {
            pairs.push(PairSample {
                split,
                query: record.id,
                neighbor: n.id,
                label: Label::Positive,
                class: record.class,
                rank: r + 1,
            });
        }

        let negative_classes: Vec<ClassId> = match config.negative_mode {
            NegativeMode::HardTopQ => top.classes().filter(|&c| c != record.class).collect(),
            NegativeMode::RandomClass => {
                let wanted = if truth_in_top { config.q - 1 } else { config.q };
                let others: Vec<ClassId> = (0..store.num_classes() as u32)
                    .map(ClassId)
                    .filter(|&c| c != record.class)
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(u64::from(record.id.0));
                let mut picked: Vec<ClassId> = sample(&mut rng, others.len(), wanted)
                    .into_iter()
                    .map(|i| others[i])
                    .collect();
                picked.sort();
                picked
            }
        };
        for class in negative_classes {
            let n = index.nearest_in_class(&pooled, class, config.nn_rank, exclude)?;
            pairs.push(PairSample {
                split,
                query: record.id,
                neighbor: n.id,
                label: Label::Negative,
                class,
                rank: config.nn_rank,
            });
        }
    }
    Ok(PairSet { pairs })
}

/// Training pairs: queries and neighbors both from the training split.
pub fn sample_train(store: &EmbeddingStore, table: &ProbabilityTable, index: &ClassIndex, config: &SamplerConfig) -> Result<PairSet> {
    sample_pairs(store, Split::Train, table, index, config)
}

/// Evaluation pairs: test-split queries against training neighbors, with
/// identical-grid pairs removed and labels balanced exactly 50/50.
pub fn sample_eval(store: &EmbeddingStore, table: &ProbabilityTable, index: &ClassIndex, config: &SamplerConfig) -> Result<PairSet> {
    let raw = sample_pairs(store, Split::Test, table, index, config)?;
    let deduped = remove_identical(store, raw)?;
    Ok(balance(deduped, config.seed))
}

/// Drops pairs whose two members have bitwise-identical token grids.
pub fn remove_identical(store: &EmbeddingStore, set: PairSet) -> Result<PairSet> {
    let mut kept = Vec::with_capacity(set.len());
    for p in set.pairs {
        let a = store.get(p.split, p.query)?.grid();
        let b = store.get(Split::Train, p.neighbor)?.grid();
        let identical = a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if !identical {
            kept.push(p);
        }
    }
    Ok(PairSet { pairs: kept })
}

/// Removes a seeded uniform choice of majority-label pairs so both labels
/// are equally frequent. Order of the survivors is preserved.
pub fn balance(set: PairSet, seed: u64) -> PairSet {
    let (pos, neg) = (set.positives(), set.negatives());
    if pos == neg {
        return set;
    }
    let majority = if pos > neg { Label::Positive } else { Label::Negative };
    let candidates: Vec<usize> = (0..set.len()).filter(|&i| set.pairs[i].label == majority).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = candidates;
    shuffled.shuffle(&mut rng);
    let drop: HashSet<usize> = shuffled.into_iter().take(pos.abs_diff(neg)).collect();
    PairSet {
        pairs: set
            .pairs
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, p)| p)
            .collect(),
    }
}

/// Result of [`pair_count_audit`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub expected: usize,
    pub actual: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the per-query pair counts (`2Q − 1` when the true class is in the
/// top-Q, `2Q` otherwise) and label consistency. `queries` lists each query
/// with its true class.
pub fn pair_count_audit(set: &PairSet, queries: &[(RecordId, ClassId)], table: &ProbabilityTable, q: usize) -> AuditReport {
    let mut per_query: BTreeMap<RecordId, Vec<&PairSample>> = BTreeMap::new();
    for p in &set.pairs {
        per_query.entry(p.query).or_default().push(p);
    }
    let mut violations = Vec::new();
    let mut expected = 0;
    for &(id, truth) in queries {
        let top = match table.get(id).and_then(|o| o.top_q(q)) {
            Ok(t) => t,
            Err(e) => {
                violations.push(format!("query {id}: {e}"));
                continue;
            }
        };
        let want = if top.contains(truth) { 2 * q - 1 } else { 2 * q };
        expected += want;
        let got = per_query.remove(&id).unwrap_or_default();
        if got.len() != want {
            violations.push(format!("query {id}: {} pairs, expected {want}", got.len()));
        }
        for p in got {
            if p.label.is_positive() != (p.class == truth) {
                violations.push(format!("query {id}: pair with neighbor {} has inconsistent label", p.neighbor));
            }
            if p.split == Split::Train && p.neighbor == p.query {
                violations.push(format!("query {id}: paired with itself"));
            }
        }
    }
    for (id, rest) in per_query {
        violations.push(format!("query {id}: {} pairs for a query outside the audited set", rest.len()));
    }
    AuditReport {
        expected,
        actual: set.len(),
        violations,
    }
}
