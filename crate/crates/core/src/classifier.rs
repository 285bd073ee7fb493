//! Classifier outputs: validated probability tables, top-Q selection and a
//! synthetic centroid classifier.
//!
//! Probability tables live on disk as a little-endian `f32` matrix
//! (`rows × classes`) next to a JSON sidecar naming the split, the record id
//! of every row and the payload checksum.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedstore::{checksum, EmbeddingRecord, EmbeddingStore};
use crate::error::{Error, Result};
use crate::ids::{ClassId, RecordId, Split};
use crate::numkernel::kernels::softmax_in_place;

pub const PROBABILITY_FORMAT: &str = "pcnn-probabilities/1";
/// Row-sum tolerance for tables read from disk.
pub const FILE_SUM_TOLERANCE: f64 = 1e-4;

/// Probability distribution of the classifier over all classes for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    pub record: RecordId,
    pub probs: Vec<f64>,
}

fn check_row(record: RecordId, probs: &[f64], tolerance: f64) -> std::result::Result<(), String> {
    if let Some((c, p)) = probs.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
        return Err(format!("row {record}: probability {p} of class {c} outside [0, 1]"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > tolerance {
        return Err(format!("row {record}: probabilities sum to {sum}"));
    }
    Ok(())
}

impl ClassifierOutput {
    pub fn new(record: RecordId, probs: Vec<f64>) -> Result<Self> {
        check_row(record, &probs, 1e-6).map_err(Error::Validation)?;
        Ok(ClassifierOutput { record, probs })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// The `q` most probable classes, descending; ties go to the lower class id.
    pub fn top_q(&self, q: usize) -> Result<TopQPrediction> {
        let c = self.probs.len();
        if q == 0 || q > c {
            return Err(Error::Config(format!("top-Q needs 1 <= Q <= {c}, got {q}")));
        }
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        Ok(TopQPrediction {
            entries: order[..q].iter().map(|&k| (ClassId(k as u32), self.probs[k])).collect(),
        })
    }

    pub fn top1(&self) -> ClassId {
        self.top_q(1).expect("at least one class").entries[0].0
    }
}

/// Ordered `(class, probability)` list, descending probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopQPrediction {
    pub entries: Vec<(ClassId, f64)>,
}

impl TopQPrediction {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.entries.iter().any(|e| e.0 == class)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbabilitySidecar {
    format: String,
    split: Split,
    classes: usize,
    record_ids: Vec<RecordId>,
    payload: String,
    checksum: String,
}

/// Classifier outputs for one split, keyed by record id.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    split: Split,
    num_classes: usize,
    rows: Vec<ClassifierOutput>,
    lookup: HashMap<RecordId, usize>,
}

impl ProbabilityTable {
    pub fn new(split: Split, num_classes: usize, rows: Vec<ClassifierOutput>) -> Result<Self> {
        let mut problems = Vec::new();
        let mut lookup = HashMap::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.probs.len() != num_classes {
                problems.push(format!("row {}: {} columns, expected {num_classes}", row.record, row.probs.len()));
            } else if let Err(msg) = check_row(row.record, &row.probs, FILE_SUM_TOLERANCE) {
                problems.push(msg);
            }
            if lookup.insert(row.record, i).is_some() {
                problems.push(format!("row {}: duplicate record id", row.record));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems.join("; ")));
        }
        Ok(ProbabilityTable {
            split,
            num_classes,
            rows,
            lookup,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn rows(&self) -> &[ClassifierOutput] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, record: RecordId) -> Result<&ClassifierOutput> {
        self.lookup
            .get(&record)
            .map(|&i| &self.rows[i])
            .ok_or(Error::UnknownRecord {
                id: record,
                split: self.split.to_string(),
            })
    }

    /// Checks that the table covers exactly the records of its split.
    pub fn validate_against(&self, store: &EmbeddingStore) -> Result<()> {
        if self.num_classes != store.num_classes() {
            return Err(Error::Validation(format!(
                "table has {} classes, dataset has {}",
                self.num_classes,
                store.num_classes()
            )));
        }
        if self.rows.len() != store.split_len(self.split) {
            return Err(Error::Validation(format!(
                "table has {} rows, {} split has {} records",
                self.rows.len(),
                self.split,
                store.split_len(self.split)
            )));
        }
        for r in store.split(self.split) {
            self.get(r.id)?;
        }
        Ok(())
    }

    /// Writes the `f32` matrix to `payload` and the sidecar to `sidecar`.
    pub fn save(&self, sidecar: &Path, payload: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.rows.len() * self.num_classes * 4);
        for row in &self.rows {
            for &p in &row.probs {
                bytes.extend_from_slice(&(p as f32).to_le_bytes());
            }
        }
        let meta = ProbabilitySidecar {
            format: PROBABILITY_FORMAT.into(),
            split: self.split,
            classes: self.num_classes,
            record_ids: self.rows.iter().map(|r| r.record).collect(),
            payload: payload
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            checksum: checksum(&bytes),
        };
        fs::write(payload, &bytes).map_err(|e| Error::io(payload, e))?;
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("probability sidecar", e))?;
        fs::write(sidecar, text).map_err(|e| Error::io(sidecar, e))
    }

    /// Reads a sidecar and the payload it names (relative to the sidecar).
    pub fn load(sidecar: &Path) -> Result<Self> {
        let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
        let meta: ProbabilitySidecar =
            serde_json::from_str(&text).map_err(|e| Error::json(sidecar.display().to_string(), e))?;
        if meta.format != PROBABILITY_FORMAT {
            return Err(Error::Validation(format!("unsupported probability format {:?}", meta.format)));
        }
        let payload_path: PathBuf = sidecar.parent().unwrap_or(Path::new(".")).join(&meta.payload);
        let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
        let row_bytes = meta.classes * 4;
        if bytes.len() != meta.record_ids.len() * row_bytes {
            return Err(Error::Ingestion {
                offset: (bytes.len() / row_bytes.max(1) * row_bytes) as u64,
                reason: format!(
                    "probability payload is {} bytes, {} rows × {} classes need {}",
                    bytes.len(),
                    meta.record_ids.len(),
                    meta.classes,
                    meta.record_ids.len() * row_bytes
                ),
            });
        }
        if checksum(&bytes) != meta.checksum {
            return Err(Error::Ingestion {
                offset: 0,
                reason: "probability payload checksum mismatch".into(),
            });
        }
        let rows = meta
            .record_ids
            .iter()
            .zip(bytes.chunks_exact(row_bytes))
            .map(|(&record, chunk)| ClassifierOutput {
                record,
                probs: chunk
                    .chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                    .collect(),
            })
            .collect();
        Self::new(meta.split, meta.classes, rows)
    }
}

/// Seeded logit swap that turns an accurate classifier into a weak one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// Fraction of queries whose top-1 logit is swapped.
    pub rate: f64,
    /// The swap partner is drawn uniformly from ranks `2..=pool`.
    pub pool: usize,
    pub seed: u64,
}

impl Corruption {
    pub fn none() -> Self {
        Corruption {
            rate: 0.0,
            pool: 2,
            seed: 0,
        }
    }
}

/// Softmax over negative squared distances to class centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClassifier {
    centroids: Vec<Vec<f64>>,
    temperature: f64,
    corruption: Corruption,
}

impl SyntheticClassifier {
    pub fn new(centroids: Vec<Vec<f64>>, temperature: f64, corruption: Corruption) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        if !(0.0..=1.0).contains(&corruption.rate) {
            return Err(Error::Config(format!("corruption rate must lie in [0, 1], got {}", corruption.rate)));
        }
        if centroids.len() < 2 {
            return Err(Error::Config("need at least two centroids".into()));
        }
        if corruption.rate > 0.0 && corruption.pool < 2 {
            return Err(Error::Config("corruption pool must include a second class".into()));
        }
        Ok(SyntheticClassifier {
            centroids,
            temperature,
            corruption,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn predict_pooled(&self, record: RecordId, pooled: &[f64]) -> Result<ClassifierOutput> {
        let d = self.centroids[0].len();
        if pooled.len() != d {
            return Err(Error::dim("synthetic classifier", &[d], &[pooled.len()]));
        }
        let mut logits: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| -crate::nnindex::squared_l2(pooled, c) / self.temperature)
            .collect();
        if self.corruption.rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.corruption.seed);
            rng.set_stream(u64::from(record.0));
            if rng.random::<f64>() < self.corruption.rate {
                let mut order: Vec<usize> = (0..logits.len()).collect();
                order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
                let pool = self.corruption.pool.min(logits.len());
                let partner = order[rng.random_range(1..pool)];
                logits.swap(order[0], partner);
            }
        }
        softmax_in_place(&mut logits);
        ClassifierOutput::new(record, logits)
    }

    pub fn predict(&self, record: &EmbeddingRecord) -> Result<ClassifierOutput> {
        self.predict_pooled(record.id, &record.pooled())
    }

    pub fn predict_split(&self, store: &EmbeddingStore, split: Split) -> Result<ProbabilityTable> {
        let rows = store.split(split).map(|r| self.predict(r)).collect::<Result<Vec<_>>>()?;
        ProbabilityTable::new(split, self.num_classes(), rows)
    }
}
