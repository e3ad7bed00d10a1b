//! Binary checkpoints:
//!
//! ```text
//! "AIDECKPT" | u16 version | u32 header_len | JSON header | f64 LE payloads
//! ```
//!
//! The header carries the configuration, training progress and a tensor
//! directory (name, shape, byte offset into the payload). Each parameter
//! contributes its value and the two AdamW moments (`name#adam_m`,
//! `name#adam_v`), in parameter order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AideConfig, SemanticSource};
use super::embedding::EmbeddingTable;
use super::params::ModelParams;
use super::pipeline::{self, Diagnostics, PreparedInput, Preprocessor};
use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::nn::{sigmoid, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AIDECKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: AideConfig,
    pub seed: u64,
    pub epochs_completed: usize,
    /// Mean training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Table dimension in embedded-table mode.
    pub semantic_input_dim: Option<usize>,
    pub params: ModelParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step_count: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u16,
    config: AideConfig,
    seed: u64,
    epochs_completed: usize,
    epoch_losses: Vec<f64>,
    semantic_input_dim: Option<usize>,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Parameter skeleton for a configuration; values are overwritten on load.
fn skeleton(cfg: &AideConfig, semantic_input_dim: Option<usize>) -> ModelParams {
    ModelParams::init(
        cfg.encoder_dim,
        cfg.semantic_dim,
        cfg.fusion_hidden,
        semantic_input_dim,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&Tensor> = Vec::new();
        let mut offset = 0u64;
        for (name, p) in self.params.named() {
            for (suffix, t) in [("", &p.value), ("#adam_m", &p.adam_m), ("#adam_v", &p.adam_v)] {
                tensors.push(TensorEntry {
                    name: format!("{name}{suffix}"),
                    shape: t.shape().to_vec(),
                    offset,
                    step_count: suffix.is_empty().then_some(p.step_count),
                });
                offset += 8 * t.len() as u64;
                payload.push(t);
            }
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            epochs_completed: self.epochs_completed,
            epoch_losses: self.epoch_losses.clone(),
            semantic_input_dim: self.semantic_input_dim,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(14 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 {
            return Err(corrupt(format!("{} bytes is shorter than the fixed preamble", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic, expected AIDECKPT"));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let json = bytes
            .get(14..14 + header_len)
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("header version {} disagrees with preamble", header.format_version)));
        }
        header
            .config
            .validate()
            .map_err(|e| corrupt(format!("stored configuration invalid: {e}")))?;
        let payload = &bytes[14 + header_len..];
        let mut params = skeleton(&header.config, header.semantic_input_dim);
        let mut entries = header.tensors.iter();
        let mut expected_offset = 0u64;
        for (name, p) in params.named_mut() {
            for suffix in ["", "#adam_m", "#adam_v"] {
                let full = format!("{name}{suffix}");
                let e = entries
                    .next()
                    .ok_or_else(|| corrupt(format!("tensor directory lacks {full}")))?;
                if e.name != full {
                    return Err(corrupt(format!("expected tensor {full}, found {}", e.name)));
                }
                if e.shape != p.shape() {
                    return Err(corrupt(format!("{full}: shape {:?}, expected {:?}", e.shape, p.shape())));
                }
                if e.offset != expected_offset {
                    return Err(corrupt(format!("{full}: offset {}, expected {expected_offset}", e.offset)));
                }
                let n: usize = e.shape.iter().product();
                let start = e.offset as usize;
                let raw = payload
                    .get(start..start + 8 * n)
                    .ok_or_else(|| corrupt(format!("{full}: payload truncated")))?;
                let data: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t = Tensor::new(e.shape.clone(), data)?;
                match suffix {
                    "" => {
                        p.value = t;
                        p.step_count = e.step_count.ok_or_else(|| corrupt(format!("{full}: missing step_count")))?;
                    }
                    "#adam_m" => p.adam_m = t,
                    _ => p.adam_v = t,
                }
                expected_offset += 8 * n as u64;
            }
        }
        if let Some(extra) = entries.next() {
            return Err(corrupt(format!("unexpected tensor {}", extra.name)));
        }
        if payload.len() as u64 != expected_offset {
            return Err(corrupt(format!(
                "payload is {} bytes, directory describes {expected_offset}",
                payload.len()
            )));
        }
        Ok(Self {
            config: header.config,
            seed: header.seed,
            epochs_completed: header.epochs_completed,
            epoch_losses: header.epoch_losses,
            semantic_input_dim: header.semantic_input_dim,
            params,
        })
    }

    pub fn preprocessor(&self) -> Result<Preprocessor> {
        Preprocessor::new(&self.config)
    }

    /// Checks that the table (if needed) matches the trained projection.
    pub fn check_table(&self, table: Option<&EmbeddingTable>) -> Result<()> {
        if self.config.semantic_source != SemanticSource::EmbeddedTable || !self.config.ablation.uses_semantic() {
            return Ok(());
        }
        let t = table.ok_or_else(|| Error::Config("checkpoint uses an embedding table; none given".into()))?;
        if Some(t.dim()) != self.semantic_input_dim {
            return Err(Error::Config(format!(
                "embedding table dimension {} does not match checkpoint ({:?})",
                t.dim(),
                self.semantic_input_dim
            )));
        }
        Ok(())
    }

    pub fn logit(&self, input: &PreparedInput) -> Result<f64> {
        pipeline::logit(&self.params, input, &self.config)
    }

    /// Fake-probability of one image.
    pub fn score(&self, img: &RgbImage, id: &str, table: Option<&EmbeddingTable>) -> Result<f64> {
        let input = self.preprocessor()?.prepare(img, id, table)?;
        Ok(sigmoid(self.logit(&input)?))
    }

    pub fn diagnose(&self, img: &RgbImage, id: &str, table: Option<&EmbeddingTable>) -> Result<Diagnostics> {
        let input = self.preprocessor()?.prepare(img, id, table)?;
        pipeline::diagnose(&self.params, &input, &self.config)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let cfg = AideConfig {
            encoder_dim: 8,
            semantic_dim: 4,
            fusion_hidden: 6,
            ..AideConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ModelParams::init(8, 4, 6, None, &mut rng);
        for (_, p) in params.named_mut() {
            for v in p.adam_m.data_mut().iter_mut().chain(p.adam_v.data_mut()) {
                *v = rng.random::<f64>() * 1e-3;
            }
            p.step_count = 17;
        }
        Checkpoint {
            config: cfg,
            seed: 5,
            epochs_completed: 2,
            epoch_losses: vec![0.693_147_180_559_945_3, 0.1 + 0.2],
            semantic_input_dim: None,
            params,
        }
    }

    #[test]
    fn round_trip_bitwise() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in ck.params.named().into_iter().zip(back.params.named()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn embedded_table_layout() {
        let mut ck = sample();
        ck.config.semantic_source = SemanticSource::EmbeddedTable;
        ck.semantic_input_dim = Some(5);
        ck.params = ModelParams::init(8, 4, 6, Some(5), &mut ChaCha8Rng::seed_from_u64(1));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(back.params.semantic.encoder.is_none());
        assert_eq!(back, ck);
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 13, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::CorruptCheckpoint(_))));
    }
}
