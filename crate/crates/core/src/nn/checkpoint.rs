//! Single-file checkpoint: `PLYCKPT1`, a little-endian u32 header length, a
//! JSON header, then every tensor as raw little-endian f32 in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::unet::EncoderConfig;
use super::NamedParams;

const MAGIC: &[u8; 8] = b"PLYCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint stage is {got:?}, expected {expected:?}")]
    WrongStage { expected: Stage, got: Stage },
    #[error("encoder config mismatch: checkpoint {checkpoint}, requested {requested}")]
    ConfigMismatch { checkpoint: String, requested: String },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor {name} has shape {got:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("truncated checkpoint data")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    pub stage: Stage,
    pub config_hash: String,
    pub optimizer: String,
    pub proj_dim: Option<usize>,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn capture(
        encoder: EncoderConfig,
        stage: Stage,
        config_hash: impl Into<String>,
        optimizer: impl Into<String>,
        proj_dim: Option<usize>,
        epoch: usize,
        params: NamedParams<'_>,
    ) -> Self {
        let mut tensors = Vec::with_capacity(params.len());
        let mut data = Vec::with_capacity(params.len());
        for (name, p) in params {
            tensors.push(TensorEntry {
                name,
                shape: p.shape.clone(),
            });
            data.push(p.value.clone());
        }
        Self {
            header: CheckpointHeader {
                encoder,
                stage,
                config_hash: config_hash.into(),
                optimizer: optimizer.into(),
                proj_dim,
                epoch,
                tensors,
            },
            data,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<(&TensorEntry, &[f32])> {
        self.header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| (&self.header.tensors[i], self.data[i].as_slice()))
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<(), CheckpointError> {
        if self.header.stage != stage {
            return Err(CheckpointError::WrongStage {
                expected: stage,
                got: self.header.stage,
            });
        }
        Ok(())
    }

    pub fn expect_encoder(&self, cfg: &EncoderConfig) -> Result<(), CheckpointError> {
        if &self.header.encoder != cfg {
            return Err(CheckpointError::ConfigMismatch {
                checkpoint: serde_json::to_string(&self.header.encoder)?,
                requested: serde_json::to_string(cfg)?,
            });
        }
        Ok(())
    }

    /// Copies every tensor whose name starts with `prefix` into the
    /// same-named model parameter. Returns the number of tensors copied.
    pub fn load_into(&self, prefix: &str, params: NamedParams<'_>) -> Result<usize, CheckpointError> {
        let mut copied = 0;
        for (name, p) in params {
            if !name.starts_with(prefix) {
                continue;
            }
            let (entry, values) = self
                .tensor(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if entry.shape != p.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: p.shape.clone(),
                    got: entry.shape.clone(),
                });
            }
            p.value.copy_from_slice(values);
            copied += 1;
        }
        Ok(copied)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for t in &self.data {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let mut data = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
            data.push(
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ContrastiveModel, Parameterized, SegmentationModel};
    use crate::rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            stage_widths: vec![2, 4],
            downsamples: 1,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = ContrastiveModel::new(cfg(), 8, &mut rng::seeded(1)).unwrap();
        let ck = Checkpoint::capture(cfg(), Stage::Pretrained, "abc", "adam", Some(8), 3, m.params());
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(matches!(
            Checkpoint::read_from(&b"NOTACKPT...."[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut m = ContrastiveModel::new(cfg(), 8, &mut rng::seeded(1)).unwrap();
        let ck = Checkpoint::capture(cfg(), Stage::Pretrained, "", "adam", Some(8), 0, m.params());
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            Checkpoint::read_from(bytes.as_slice()),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn encoder_transfer_is_bit_identical() {
        let mut pre = ContrastiveModel::new(cfg(), 8, &mut rng::seeded(1)).unwrap();
        let ck = Checkpoint::capture(cfg(), Stage::Pretrained, "", "adam", Some(8), 0, pre.params());
        let mut seg = SegmentationModel::new(cfg(), &mut rng::seeded(99)).unwrap();
        let n = ck.load_into("encoder.", seg.params()).unwrap();
        assert!(n > 0);
        let a: Vec<_> = pre.encoder.params().into_iter().map(|(k, p)| (k, p.value.clone())).collect();
        let b: Vec<_> = seg.encoder.params().into_iter().map(|(k, p)| (k, p.value.clone())).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn stage_and_config_checks() {
        let mut pre = ContrastiveModel::new(cfg(), 8, &mut rng::seeded(1)).unwrap();
        let ck = Checkpoint::capture(cfg(), Stage::Pretrained, "", "adam", Some(8), 0, pre.params());
        assert!(ck.expect_stage(Stage::Pretrained).is_ok());
        assert!(matches!(
            ck.expect_stage(Stage::Finetuned),
            Err(CheckpointError::WrongStage { .. })
        ));
        let other = EncoderConfig {
            stage_widths: vec![2, 8],
            ..cfg()
        };
        assert!(matches!(
            ck.expect_encoder(&other),
            Err(CheckpointError::ConfigMismatch { .. })
        ));
    }
}
