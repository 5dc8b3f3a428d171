//! Pieces shared by the pre-training and fine-tuning loops.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetIndex, Split};
use crate::nn::Tensor;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_dice: Option<f64>,
}

impl EpochRecord {
    /// Everything except `wall_time`, for reproducibility comparisons.
    pub fn deterministic_part(&self) -> (usize, u64, u64, Option<u64>) {
        (
            self.epoch,
            self.mean_loss.to_bits(),
            self.lr.to_bits(),
            self.val_dice.map(f64::to_bits),
        )
    }
}

pub fn write_metrics(path: &Path, records: &[EpochRecord]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<EpochRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::from))
        .collect()
}

/// Stacks the pixel planes of `ids` into an `[n, 1, h, w]` batch.
pub fn image_batch(index: &DatasetIndex, ids: &[usize]) -> Tensor {
    let (h, w) = ids
        .first()
        .map(|&i| index.record(i).pixels.dim())
        .unwrap_or((0, 0));
    let mut out = Tensor::zeros((ids.len(), 1, h, w));
    for (b, &i) in ids.iter().enumerate() {
        out.slice_mut(ndarray::s![b, 0, .., ..])
            .assign(&index.record(i).pixels);
    }
    out
}

/// Training records of `index`, or all of them when no split is assigned.
pub fn training_view(index: &DatasetIndex) -> DatasetIndex {
    if index.split_indices(Split::Train).is_empty() {
        index.clone()
    } else {
        index.subset(Split::Train)
    }
}
