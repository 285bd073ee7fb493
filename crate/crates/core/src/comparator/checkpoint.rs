//! Checkpoint files: a JSON header plus a little-endian `f64` blob holding
//! every parameter tensor in canonical order followed by the batch-norm
//! running statistics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::BinaryMetrics;
use super::{ComparatorConfig, ComparatorModel, MLP_WIDE};
use crate::embedstore::checksum;
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

pub const CHECKPOINT_FORMAT: &str = "pcnn-comparator/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ComparatorConfig,
    pub seed: u64,
    pub epoch: usize,
    pub metrics: Option<BinaryMetrics>,
    pub blob: String,
    pub checksum: String,
}

impl ComparatorModel {
    /// Writes `header` (JSON) and the parameter blob it names.
    pub fn save(&self, header: &Path, blob: &Path, seed: u64, epoch: usize, metrics: Option<BinaryMetrics>) -> Result<()> {
        let mut bytes = Vec::with_capacity((self.parameter_count() + 2 * (MLP_WIDE + self.config.mlp_hidden)) * 8);
        let running = self.running.iter().flat_map(|(m, v)| m.iter().chain(v));
        for v in self.params.iter().flat_map(|p| p.data()).chain(running) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let head = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config,
            seed,
            epoch,
            metrics,
            blob: blob.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            checksum: checksum(&bytes),
        };
        fs::write(blob, &bytes).map_err(|e| Error::io(blob, e))?;
        let text = serde_json::to_string_pretty(&head).map_err(|e| Error::json("checkpoint header", e))?;
        fs::write(header, text).map_err(|e| Error::io(header, e))
    }

    /// Reads a checkpoint; the blob path is resolved next to the header.
    pub fn load(header: &Path) -> Result<(Self, CheckpointHeader)> {
        let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
        let head: CheckpointHeader =
            serde_json::from_str(&text).map_err(|e| Error::json(header.display().to_string(), e))?;
        if head.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!("unsupported checkpoint format {:?}", head.format)));
        }
        let blob = header.parent().unwrap_or(Path::new(".")).join(&head.blob);
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        if checksum(&bytes) != head.checksum {
            return Err(Error::Ingestion {
                offset: 0,
                reason: "checkpoint blob checksum mismatch".into(),
            });
        }
        let config = head.config;
        config.validate()?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let h = config.mlp_hidden;
        let expected = config.parameter_count() + 2 * (MLP_WIDE + h);
        if bytes.len() % 8 != 0 || values.len() != expected {
            return Err(Error::Ingestion {
                offset: (values.len().min(expected) * 8) as u64,
                reason: format!("checkpoint blob holds {} values, expected {expected}", values.len()),
            });
        }
        let mut rest = values.as_slice();
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let mut params = Vec::new();
        for shape in config.parameter_shapes() {
            let n = shape.iter().product();
            params.push(Tensor::new(shape, take(n))?);
        }
        let running = [(take(MLP_WIDE), take(MLP_WIDE)), (take(h), take(h))];
        Ok((ComparatorModel::from_parts(config, params, running)?, head))
    }
}
