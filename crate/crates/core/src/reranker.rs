//! Re-ranking the classifier's top-K classes with a pair scorer, plus the
//! kNN baselines, sanity checks and the top-Q ceiling table.
//!
//! Soft mode ranks classes by `C probability × S score`; hard mode ranks by
//! the S score alone (C only selects the candidates). Classes whose
//! probability falls below the floor `φ` are not scored and cannot be
//! predicted.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierOutput, ProbabilityTable};
use crate::comparator::ComparatorModel;
use crate::embedstore::{EmbeddingRecord, EmbeddingStore};
use crate::error::{Error, Result};
use crate::ids::{ClassId, RecordId, Split};
use crate::nnindex::ClassIndex;

/// Scores (query, training record) pairs.
pub trait PairScorer {
    fn score(&self, store: &EmbeddingStore, query: &EmbeddingRecord, neighbors: &[RecordId]) -> Result<Vec<f64>>;
}

impl PairScorer for ComparatorModel {
    fn score(&self, store: &EmbeddingStore, query: &EmbeddingRecord, neighbors: &[RecordId]) -> Result<Vec<f64>> {
        if neighbors.is_empty() {
            return Ok(Vec::new());
        }
        let q: Vec<f64> = query.grid().iter().map(|&v| f64::from(v)).collect();
        let mut g1 = Vec::with_capacity(q.len() * neighbors.len());
        let mut g2 = Vec::with_capacity(q.len() * neighbors.len());
        for &id in neighbors {
            g1.extend_from_slice(&q);
            g2.extend(store.get(Split::Train, id)?.grid().iter().map(|&v| f64::from(v)));
        }
        self.score_grids(&g1, &g2, neighbors.len())
    }
}

/// Ground-truth scorer: 1 when the neighbor shares the query's class.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl PairScorer for OracleScorer {
    fn score(&self, store: &EmbeddingStore, query: &EmbeddingRecord, neighbors: &[RecordId]) -> Result<Vec<f64>> {
        neighbors
            .iter()
            .map(|&id| Ok(if store.get(Split::Train, id)?.class == query.class { 1.0 } else { 0.0 }))
            .collect()
    }
}

/// Cosine similarity of pooled vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct CosineScorer;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl PairScorer for CosineScorer {
    fn score(&self, store: &EmbeddingStore, query: &EmbeddingRecord, neighbors: &[RecordId]) -> Result<Vec<f64>> {
        let q = query.pooled();
        neighbors
            .iter()
            .map(|&id| Ok(cosine(&q, &store.get(Split::Train, id)?.pooled())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankMode {
    /// Rank by S alone (C→S).
    Hard,
    /// Rank by C × S.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub k: usize,
    pub n_neighbors: usize,
    pub mode: RerankMode,
    /// Classes with probability below this floor are not scored.
    pub floor: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            k: 10,
            n_neighbors: 1,
            mode: RerankMode::Soft,
            floor: 0.0,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_neighbors == 0 {
            return Err(Error::Config("K and n_neighbors must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.floor) {
            return Err(Error::Config(format!("probability floor must lie in [0, 1), got {}", self.floor)));
        }
        Ok(())
    }
}

/// One candidate class of a [`RankedResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedClass {
    pub class: ClassId,
    pub probability: f64,
    /// Training records that represented the class (empty when skipped).
    pub neighbors: Vec<RecordId>,
    /// Mean S score over `neighbors`; `None` when skipped.
    pub score: Option<f64>,
    /// Ranking score; `None` when skipped.
    pub final_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query: RecordId,
    pub split: Split,
    pub mode: RerankMode,
    /// Candidates in ranked order; skipped classes follow in C order.
    pub classes: Vec<RankedClass>,
    pub predicted: ClassId,
    /// Number of (query, neighbor) pairs sent to the scorer.
    pub comparator_queries: usize,
}

fn by_rank(a: &RankedClass, b: &RankedClass) -> Ordering {
    match (a.final_score, b.final_score) {
        (Some(x), Some(y)) => y
            .total_cmp(&x)
            .then(b.probability.total_cmp(&a.probability))
            .then(a.class.cmp(&b.class)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => b.probability.total_cmp(&a.probability).then(a.class.cmp(&b.class)),
    }
}

/// Scored top-K candidates of one query, before the mode is applied.
#[derive(Debug, Clone)]
struct Candidates {
    query: RecordId,
    split: Split,
    entries: Vec<RankedClass>,
    queries: usize,
}

impl Candidates {
    fn rank(&self, mode: RerankMode) -> RankedResult {
        let mut classes = self.entries.clone();
        for c in classes.iter_mut() {
            c.final_score = c.score.map(|s| match mode {
                RerankMode::Soft => c.probability * s,
                RerankMode::Hard => s,
            });
        }
        classes.sort_by(by_rank);
        RankedResult {
            query: self.query,
            split: self.split,
            mode,
            predicted: classes[0].class,
            classes,
            comparator_queries: self.queries,
        }
    }
}

fn candidates(
    store: &EmbeddingStore,
    query: &EmbeddingRecord,
    output: &ClassifierOutput,
    index: &ClassIndex,
    scorer: &dyn PairScorer,
    config: &RerankConfig,
) -> Result<Candidates> {
    config.validate()?;
    let top = output.top_q(config.k)?;
    let pooled = query.pooled();
    let exclude: &[RecordId] = if query.split == Split::Train { std::slice::from_ref(&query.id) } else { &[] };
    let mut entries = Vec::with_capacity(top.len());
    let mut ids = Vec::new();
    let mut owners = Vec::new();
    for (slot, &(class, probability)) in top.entries.iter().enumerate() {
        let mut neighbors = Vec::new();
        if probability >= config.floor {
            neighbors = index
                .nearest_k_in_class(&pooled, class, config.n_neighbors, exclude)?
                .into_iter()
                .map(|n| n.id)
                .collect();
            ids.extend_from_slice(&neighbors);
            owners.extend(std::iter::repeat_n(slot, neighbors.len()));
        }
        entries.push(RankedClass {
            class,
            probability,
            neighbors,
            score: None,
            final_score: None,
        });
    }
    let scores = scorer.score(store, query, &ids)?;
    let mut sums = vec![0.0; entries.len()];
    for (&slot, s) in owners.iter().zip(&scores) {
        sums[slot] += s;
    }
    for (e, sum) in entries.iter_mut().zip(sums) {
        if !e.neighbors.is_empty() {
            e.score = Some(sum / e.neighbors.len() as f64);
        }
    }
    Ok(Candidates {
        query: query.id,
        split: query.split,
        entries,
        queries: ids.len(),
    })
}

/// Re-ranks one query's top-K classes.
pub fn rerank(
    store: &EmbeddingStore,
    query: &EmbeddingRecord,
    output: &ClassifierOutput,
    index: &ClassIndex,
    scorer: &dyn PairScorer,
    config: &RerankConfig,
) -> Result<RankedResult> {
    Ok(candidates(store, query, output, index, scorer, config)?.rank(config.mode))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankReport {
    pub queries: usize,
    /// Top-1 accuracy of the classifier alone.
    pub classifier: f64,
    /// Top-1 accuracy ranking by S alone (hard mode).
    pub hard: f64,
    /// Top-1 accuracy ranking by C × S (soft mode).
    pub soft: f64,
    /// Fraction of queries whose true class is in the top-K.
    pub top_k: f64,
    pub mean_comparator_queries: f64,
}

/// Re-ranks every query of `split`; returns accuracies of C, C→S and C×S
/// and the per-query results in `config.mode`.
pub fn evaluate_rerank(
    store: &EmbeddingStore,
    split: Split,
    table: &ProbabilityTable,
    index: &ClassIndex,
    scorer: &dyn PairScorer,
    config: &RerankConfig,
) -> Result<(RerankReport, Vec<RankedResult>)> {
    let mut hits = [0usize; 4];
    let mut issued = 0usize;
    let mut results = Vec::with_capacity(store.split_len(split));
    for query in store.split(split) {
        let output = table.get(query.id)?;
        let cands = candidates(store, query, output, index, scorer, config)?;
        let hard = cands.rank(RerankMode::Hard);
        let soft = cands.rank(RerankMode::Soft);
        hits[0] += usize::from(output.top1() == query.class);
        hits[1] += usize::from(hard.predicted == query.class);
        hits[2] += usize::from(soft.predicted == query.class);
        hits[3] += usize::from(cands.entries.iter().any(|e| e.class == query.class));
        issued += cands.queries;
        results.push(match config.mode {
            RerankMode::Hard => hard,
            RerankMode::Soft => soft,
        });
    }
    let n = results.len().max(1) as f64;
    Ok((
        RerankReport {
            queries: results.len(),
            classifier: hits[0] as f64 / n,
            hard: hits[1] as f64 / n,
            soft: hits[2] as f64 / n,
            top_k: hits[3] as f64 / n,
            mean_comparator_queries: issued as f64 / n,
        },
        results,
    ))
}

pub fn write_results_jsonl(results: &[RankedResult], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in results {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json("ranked result", e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_results_jsonl(path: &Path) -> Result<Vec<RankedResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::json(format!("{} line {}", path.display(), n + 1), e)))
        .collect()
}

/// Majority vote over the `k` nearest training records (by pooled L2),
/// each rescored by `scorer`. Ties go to the higher mean score, then the
/// lower class id.
pub fn knn_classify(
    store: &EmbeddingStore,
    query: &EmbeddingRecord,
    index: &ClassIndex,
    k: usize,
    scorer: &dyn PairScorer,
) -> Result<ClassId> {
    let exclude: &[RecordId] = if query.split == Split::Train { std::slice::from_ref(&query.id) } else { &[] };
    let neighbors = index.topk_global(&query.pooled(), k, exclude)?;
    let ids: Vec<RecordId> = neighbors.iter().map(|n| n.id).collect();
    let scores = scorer.score(store, query, &ids)?;
    Ok(vote(neighbors.iter().map(|n| n.class).zip(scores)))
}

/// Class with the most votes; ties by higher mean score, then lower id.
pub fn vote(votes: impl IntoIterator<Item = (ClassId, f64)>) -> ClassId {
    let mut tally: std::collections::BTreeMap<ClassId, (usize, f64)> = Default::default();
    for (class, score) in votes {
        let e = tally.entry(class).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += score;
    }
    tally
        .into_iter()
        .map(|(c, (n, s))| (c, n, s / n as f64))
        .min_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)))
        .map(|(c, _, _)| c)
        .expect("at least one vote")
}

/// Top-1 accuracy of [`knn_classify`] over a split.
pub fn knn_accuracy(store: &EmbeddingStore, split: Split, index: &ClassIndex, k: usize, scorer: &dyn PairScorer) -> Result<f64> {
    let mut hits = 0usize;
    for q in store.split(split) {
        hits += usize::from(knn_classify(store, q, index, k, scorer)? == q.class);
    }
    Ok(hits as f64 / store.split_len(split).max(1) as f64)
}

/// Acceptance rates of the three sanity probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub pairs: usize,
    /// Query paired with itself.
    pub self_rate: f64,
    /// Query paired with a uniform-random grid.
    pub random_rate: f64,
    /// Query paired with another real query from a shuffled block.
    pub shuffled_rate: f64,
}

/// Block size of the shuffled-real probe.
pub const SHUFFLE_BLOCK: usize = 64;

/// Runs the three probes on every record of `split` and reports the
/// fraction of pairs scored above `threshold`.
pub fn sanity_suite(model: &ComparatorModel, store: &EmbeddingStore, split: Split, seed: u64, threshold: f64) -> Result<SanityReport> {
    let records: Vec<&EmbeddingRecord> = store.split(split).collect();
    if records.is_empty() {
        return Err(Error::Validation(format!("the {split} split is empty")));
    }
    let widen = |r: &EmbeddingRecord| r.grid().iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
    let (lo, hi) = store.value_range();
    let (lo, hi) = (f64::from(lo), f64::from(hi));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let mut partner = vec![0; records.len()];
    for block in order.chunks(SHUFFLE_BLOCK) {
        let mut b = block.to_vec();
        b.shuffle(&mut rng);
        // Pair each member with the next one so no record meets itself.
        for j in 0..b.len() {
            partner[b[j]] = b[(j + 1) % b.len()];
        }
    }

    let mut accepted = [0usize; 3];
    for chunk in (0..records.len()).collect::<Vec<_>>().chunks(256) {
        let n = chunk.len();
        let q: Vec<f64> = chunk.iter().flat_map(|&i| widen(records[i])).collect();
        let random: Vec<f64> = (0..q.len())
            .map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect();
        let shuffled: Vec<f64> = chunk.iter().flat_map(|&i| widen(records[partner[i]])).collect();
        for (slot, other) in [&q, &random, &shuffled].into_iter().enumerate() {
            accepted[slot] += model.score_grids(&q, other, n)?.iter().filter(|&&s| s > threshold).count();
        }
    }
    let n = records.len() as f64;
    Ok(SanityReport {
        pairs: records.len(),
        self_rate: accepted[0] as f64 / n,
        random_rate: accepted[1] as f64 / n,
        shuffled_rate: accepted[2] as f64 / n,
    })
}

/// Cumulative top-Q accuracy of the classifier for each requested Q.
pub fn topq_ceiling(store: &EmbeddingStore, table: &ProbabilityTable, qs: &[usize]) -> Result<Vec<(usize, f64)>> {
    let split = table.split();
    let mut out = Vec::with_capacity(qs.len());
    for &q in qs {
        let mut hits = 0usize;
        for r in store.split(split) {
            hits += usize::from(table.get(r.id)?.top_q(q)?.contains(r.class));
        }
        out.push((q, hits as f64 / store.split_len(split).max(1) as f64));
    }
    Ok(out)
}
