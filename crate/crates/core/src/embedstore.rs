//! Token-grid embeddings with class labels and dataset splits.
//!
//! On disk a dataset is a JSON manifest plus a raw payload: every record's
//! `tokens × depth` grid as little-endian `f32`, tokens row-major, records
//! concatenated in manifest order. The manifest carries the SHA-256 of the
//! payload. Pooled retrieval vectors are always derived (token mean), never
//! stored.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ids::{ClassId, RecordId, Split};

pub const MANIFEST_FORMAT: &str = "pcnn-embeddings/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: RecordId,
    pub class: ClassId,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub dataset: String,
    /// Class names; the position is the class id.
    pub classes: Vec<String>,
    pub tokens: usize,
    pub depth: usize,
    pub counts: SplitCounts,
    /// `sha256:<hex>` of the payload.
    pub checksum: String,
    pub records: Vec<RecordEntry>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn record_bytes(&self) -> usize {
        self.tokens * self.depth * 4
    }

    pub fn payload_len(&self) -> usize {
        self.records.len() * self.record_bytes()
    }

    fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::Validation(format!("unsupported manifest format {:?}", self.format)));
        }
        if self.tokens == 0 || self.depth == 0 {
            return Err(Error::Validation("tokens and depth must be positive".into()));
        }
        let mut names = HashSet::new();
        for name in &self.classes {
            if !names.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate class name {name:?}")));
            }
        }
        for split in [Split::Train, Split::Test] {
            let n = self.records.iter().filter(|r| r.split == split).count();
            if n != self.counts.get(split) {
                return Err(Error::Validation(format!(
                    "{split} split lists {n} records, counts say {}",
                    self.counts.get(split)
                )));
            }
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert((r.split, r.id)) {
                return Err(Error::Validation(format!("duplicate record {} in {} split", r.id, r.split)));
            }
        }
        Ok(())
    }
}

pub fn checksum(payload: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(payload)))
}

/// One image's token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: RecordId,
    pub class: ClassId,
    pub split: Split,
    tokens: usize,
    depth: usize,
    grid: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(id: RecordId, class: ClassId, split: Split, tokens: usize, depth: usize, grid: Vec<f32>) -> Result<Self> {
        if grid.len() != tokens * depth {
            return Err(Error::dim("record grid", &[tokens, depth], &[grid.len()]));
        }
        if let Some(i) = grid.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("record {id}: non-finite value at element {i}")));
        }
        Ok(EmbeddingRecord {
            id,
            class,
            split,
            tokens,
            depth,
            grid,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Row-major `tokens × depth` grid.
    pub fn grid(&self) -> &[f32] {
        &self.grid
    }

    /// Arithmetic mean of the token rows.
    pub fn pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.depth];
        for row in self.grid.chunks_exact(self.depth) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += f64::from(v);
            }
        }
        let t = self.tokens as f64;
        out.iter_mut().for_each(|o| *o /= t);
        out
    }
}

/// Immutable, validated collection of embedding records.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    manifest: DatasetManifest,
    records: Vec<EmbeddingRecord>,
    lookup: HashMap<(Split, RecordId), usize>,
    /// Per split (train, test), per class: record indices in ascending id order.
    classes: [Vec<Vec<usize>>; 2],
}

fn split_slot(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Test => 1,
    }
}

impl EmbeddingStore {
    /// Validates a manifest against its payload and builds the store.
    pub fn import(manifest: DatasetManifest, payload: &[u8]) -> Result<Self> {
        manifest.validate()?;
        let rec_bytes = manifest.record_bytes();
        let expected = manifest.payload_len();
        if payload.len() < expected {
            let offset = (payload.len() / rec_bytes * rec_bytes) as u64;
            let missing = &manifest.records[payload.len() / rec_bytes];
            return Err(Error::Ingestion {
                offset,
                reason: format!(
                    "truncated payload: record {} ({} split) needs {rec_bytes} bytes, {} available; payload is {} bytes, manifest needs {expected}",
                    missing.id,
                    missing.split,
                    payload.len() as u64 - offset,
                    payload.len()
                ),
            });
        }
        if payload.len() > expected {
            return Err(Error::Ingestion {
                offset: expected as u64,
                reason: format!("{} trailing bytes after the last record", payload.len() - expected),
            });
        }
        let actual = checksum(payload);
        if actual != manifest.checksum {
            return Err(Error::Ingestion {
                offset: 0,
                reason: format!("checksum mismatch: manifest {}, payload {actual}", manifest.checksum),
            });
        }
        let c = manifest.num_classes();
        let mut records = Vec::with_capacity(manifest.records.len());
        for (k, entry) in manifest.records.iter().enumerate() {
            let start = k * rec_bytes;
            if entry.class.index() >= c {
                return Err(Error::Ingestion {
                    offset: start as u64,
                    reason: format!("record {} has unknown class id {} (c = {c})", entry.id, entry.class.0),
                });
            }
            let bytes = &payload[start..start + rec_bytes];
            let grid: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if let Some(i) = grid.iter().position(|v| !v.is_finite()) {
                return Err(Error::Ingestion {
                    offset: (start + 4 * i) as u64,
                    reason: format!("record {} holds a non-finite value", entry.id),
                });
            }
            records.push(EmbeddingRecord {
                id: entry.id,
                class: entry.class,
                split: entry.split,
                tokens: manifest.tokens,
                depth: manifest.depth,
                grid,
            });
        }
        Ok(Self::index(manifest, records))
    }

    /// Builds a store (and its manifest) from in-memory records.
    pub fn from_records(dataset: &str, classes: Vec<String>, tokens: usize, depth: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        let mut payload = Vec::with_capacity(records.len() * tokens * depth * 4);
        for r in &records {
            if r.tokens != tokens || r.depth != depth {
                return Err(Error::dim("record grid", &[tokens, depth], &[r.tokens, r.depth]));
            }
            for v in &r.grid {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let counts = SplitCounts {
            train: records.iter().filter(|r| r.split == Split::Train).count(),
            test: records.iter().filter(|r| r.split == Split::Test).count(),
        };
        let manifest = DatasetManifest {
            format: MANIFEST_FORMAT.to_string(),
            dataset: dataset.to_string(),
            classes,
            tokens,
            depth,
            counts,
            checksum: checksum(&payload),
            records: records
                .iter()
                .map(|r| RecordEntry {
                    id: r.id,
                    class: r.class,
                    split: r.split,
                })
                .collect(),
        };
        Self::import(manifest, &payload)
    }

    fn index(manifest: DatasetManifest, records: Vec<EmbeddingRecord>) -> Self {
        let c = manifest.num_classes();
        let mut classes = [vec![Vec::new(); c], vec![Vec::new(); c]];
        let mut lookup = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            lookup.insert((r.split, r.id), i);
            classes[split_slot(r.split)][r.class.index()].push(i);
        }
        for per_split in classes.iter_mut() {
            for members in per_split.iter_mut() {
                members.sort_by_key(|&i| records[i].id);
            }
        }
        EmbeddingStore {
            manifest,
            records,
            lookup,
            classes,
        }
    }

    pub fn load(manifest_path: &Path, payload_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
        let payload = fs::read(payload_path).map_err(|e| Error::io(payload_path, e))?;
        Self::import(manifest, &payload)
    }

    /// Manifest and payload bytes; `import` of these reproduces the store.
    pub fn export(&self) -> (DatasetManifest, Vec<u8>) {
        let mut payload = Vec::with_capacity(self.manifest.payload_len());
        for r in &self.records {
            for v in &r.grid {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        (self.manifest.clone(), payload)
    }

    pub fn save(&self, manifest_path: &Path, payload_path: &Path) -> Result<()> {
        let (manifest, payload) = self.export();
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
        fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
        fs::write(payload_path, payload).map_err(|e| Error::io(payload_path, e))
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn tokens(&self) -> usize {
        self.manifest.tokens
    }

    pub fn depth(&self) -> usize {
        self.manifest.depth
    }

    pub fn class_name(&self, class: ClassId) -> Option<&str> {
        self.manifest.classes.get(class.index()).map(String::as_str)
    }

    pub fn get(&self, split: Split, id: RecordId) -> Result<&EmbeddingRecord> {
        self.lookup
            .get(&(split, id))
            .map(|&i| &self.records[i])
            .ok_or(Error::UnknownRecord {
                id,
                split: split.to_string(),
            })
    }

    /// Records of a split in manifest order.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &EmbeddingRecord> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.manifest.counts.get(split)
    }

    /// Records of one class in ascending id order. An empty class is an
    /// error in the train split, where retrieval needs candidates.
    pub fn by_class(&self, split: Split, class: ClassId) -> Result<Vec<&EmbeddingRecord>> {
        let members = self.classes[split_slot(split)]
            .get(class.index())
            .ok_or(Error::UnknownClass(class))?;
        if members.is_empty() && split == Split::Train {
            return Err(Error::EmptyClass {
                class,
                split: split.to_string(),
            });
        }
        Ok(members.iter().map(|&i| &self.records[i]).collect())
    }

    /// Smallest and largest stored value.
    pub fn value_range(&self) -> (f32, f32) {
        self.records
            .iter()
            .flat_map(|r| r.grid.iter().copied())
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }
}
