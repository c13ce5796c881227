//! Checkpoint serialization.
//!
//! Layout: magic `CTNK`, little-endian u32 format version, u64 header
//! length, a UTF-8 JSON header (config, meta, tensor manifest), then the
//! tensor values as little-endian f64 in manifest order. Everything is
//! validated on load; a bad file never yields partial state.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderWeights, ModelConfig};
use crate::error::ModelError;
use crate::numerics::{Param, Tensor};
use crate::tokenizer::Vocabulary;

const MAGIC: &[u8; 4] = b"CTNK";
const VERSION: u32 = 1;

/// Which training procedure produced the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "pretrained")]
    Pretrained,
    #[serde(rename = "coarse")]
    Coarse,
    #[serde(rename = "finetuned")]
    Finetuned,
    #[serde(rename = "cont-pre")]
    ContPre,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Pretrained => "pretrained",
            Stage::Coarse => "coarse",
            Stage::Finetuned => "finetuned",
            Stage::ContPre => "cont-pre",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrained" => Ok(Stage::Pretrained),
            "coarse" => Ok(Stage::Coarse),
            "finetuned" => Ok(Stage::Finetuned),
            "cont-pre" => Ok(Stage::ContPre),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Seeds of every training stage that produced these weights, oldest first.
    pub seed_lineage: Vec<u64>,
    /// Epochs completed in the most recent stage.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    manifest: Vec<ManifestEntry>,
}

fn format_err(msg: impl Into<String>) -> ModelError {
    ModelError::CheckpointFormat(msg.into())
}

pub fn save_checkpoint(
    weights: &EncoderWeights,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), ModelError> {
    let mut manifest = Vec::with_capacity(weights.params().len());
    let mut offset = 0u64;
    for (name, param) in weights.names().iter().zip(weights.params()) {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: param.value.shape().to_vec(),
            offset,
        });
        offset += (param.value.len() * 8) as u64;
    }
    let header = Header {
        config: weights.config().clone(),
        meta: meta.clone(),
        manifest,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;

    let mut out =
        Vec::with_capacity(4 + 4 + 8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for param in weights.params() {
        for &v in param.value.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderWeights, CheckpointMeta), ModelError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(format_err("file shorter than the fixed preamble"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16 + header_len;
    if bytes.len() < data_start {
        return Err(format_err("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| format_err(format!("header: {e}")))?;
    header.config.validate()?;

    let expected = header.config.manifest();
    if header.manifest.len() != expected.len() {
        return Err(format_err(format!(
            "manifest has {} tensors, config implies {}",
            header.manifest.len(),
            expected.len()
        )));
    }
    let data = &bytes[data_start..];
    let mut names = Vec::with_capacity(expected.len());
    let mut params = Vec::with_capacity(expected.len());
    let mut offset = 0u64;
    for (entry, (want_name, want_shape)) in header.manifest.iter().zip(&expected) {
        if &entry.name != want_name {
            return Err(format_err(format!(
                "manifest tensor {:?} where {want_name:?} expected",
                entry.name
            )));
        }
        if &entry.shape != want_shape {
            return Err(format_err(format!(
                "tensor {} has shape {:?}, expected {want_shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.offset != offset {
            return Err(format_err(format!(
                "tensor {} at offset {}, expected {offset}",
                entry.name, entry.offset
            )));
        }
        let n: usize = entry.shape.iter().product();
        let end = offset as usize + n * 8;
        if data.len() < end {
            return Err(format_err(format!("truncated data section in tensor {}", entry.name)));
        }
        let values: Vec<f64> = data[offset as usize..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        names.push(entry.name.clone());
        params.push(Param::new(Tensor::new(entry.shape.clone(), values)));
        offset = end as u64;
    }
    if data.len() != offset as usize {
        return Err(format_err(format!(
            "{} trailing bytes after the last tensor",
            data.len() - offset as usize
        )));
    }
    let weights = EncoderWeights::from_parts(header.config, names, params);
    Ok((weights, header.meta))
}

/// Loading weights trained against a different vocabulary is always a
/// mistake; the ids would silently mean different tokens.
pub fn check_vocab_size(weights: &EncoderWeights, vocab: &Vocabulary) -> Result<(), ModelError> {
    if weights.config().vocab_size != vocab.len() {
        return Err(ModelError::VocabSizeMismatch {
            checkpoint: weights.config().vocab_size,
            vocab: vocab.len(),
        });
    }
    Ok(())
}
