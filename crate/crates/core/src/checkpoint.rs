//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//! `PFXCKPT1`, u32 entry count, then per entry a u16 name length, the
//! UTF-8 name, a u8 rank, `rank` u32 dims and row-major f32 data; finally
//! a u32 byte length and a UTF-8 JSON metadata blob.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Reader;
use crate::denoiser::{DenoiserModel, ModelConfig};
use crate::diffusion::Parameterization;
use crate::error::{Error, Result};
use crate::schedule::{make_schedule, Schedule, ScheduleKind};
use crate::vocab::{EmbeddingTable, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFXCKPT1";
pub const EMBEDDING_ENTRY: &str = "emb";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn from_matrix(name: &str, m: &Array2<f64>) -> Self {
        Self {
            name: name.to_string(),
            dims: vec![m.nrows(), m.ncols()],
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let (r, c) = match self.dims.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => {
                return Err(Error::Malformed(format!(
                    "entry {} has rank {}, expected 2",
                    self.name,
                    self.dims.len()
                )))
            }
        };
        Array2::from_shape_vec((r, c), self.data.iter().map(|&v| f64::from(v)).collect())
            .map_err(|e| Error::Malformed(format!("entry {}: {e}", self.name)))
    }
}

pub fn encode_checkpoint(entries: &[TensorEntry], metadata: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        if e.name.len() > u16::MAX as usize || e.dims.len() > u8::MAX as usize {
            return Err(Error::Malformed(format!(
                "entry {} not representable",
                e.name
            )));
        }
        if e.dims.iter().product::<usize>() != e.data.len() {
            return Err(Error::Malformed(format!(
                "entry {} dims disagree with data",
                e.name
            )));
        }
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(Vec<TensorEntry>, String)> {
    if buf.len() >= 8 && &buf[..8] != CHECKPOINT_MAGIC {
        if &buf[..7] == &CHECKPOINT_MAGIC[..7] {
            return Err(Error::BadVersion);
        }
        return Err(Error::BadMagic {
            expected: "PFXCKPT1",
        });
    }
    let mut r = Reader::new(buf);
    r.take(8)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        if n.checked_mul(4).is_none_or(|bytes| bytes > r.remaining()) {
            return Err(Error::TruncatedFile { offset: buf.len() });
        }
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        entries.push(TensorEntry { name, dims, data });
    }
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    Ok((entries, meta))
}

/// Everything besides tensors needed to rebuild a sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub schedule: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub parameterization: Parameterization,
    pub clamp: bool,
    pub vocab_hash: String,
    pub vocab: Vec<String>,
    pub step: u64,
}

impl CheckpointMeta {
    pub fn schedule(&self) -> Result<Schedule> {
        make_schedule(
            self.schedule,
            self.model.steps,
            self.beta_min,
            self.beta_max,
        )
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let v = Vocabulary::from_tokens(self.vocab.clone())?;
        if v.hash() != self.vocab_hash {
            return Err(Error::Malformed("vocabulary hash mismatch".into()));
        }
        Ok(v)
    }
}

/// A loaded model with its embedding table and metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub emb: EmbeddingTable,
    pub meta: CheckpointMeta,
}

pub fn checkpoint_bytes(
    model: &DenoiserModel,
    emb: &EmbeddingTable,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>> {
    let mut entries: Vec<TensorEntry> = model
        .params()
        .iter()
        .map(|p| TensorEntry::from_matrix(&p.name, &p.value))
        .collect();
    entries.push(TensorEntry::from_matrix(EMBEDDING_ENTRY, emb.matrix()));
    encode_checkpoint(&entries, &serde_json::to_string(meta)?)
}

pub fn save_checkpoint(
    path: &Path,
    model: &DenoiserModel,
    emb: &EmbeddingTable,
    meta: &CheckpointMeta,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, emb, meta)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let (entries, meta) = decode_checkpoint(buf)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta)?;
    let named = entries
        .iter()
        .map(|e| Ok((e.name.clone(), e.to_matrix()?)))
        .collect::<Result<Vec<_>>>()?;
    let model = DenoiserModel::from_named(meta.model.clone(), &named)?;
    let emb = named
        .iter()
        .find(|(n, _)| n == EMBEDDING_ENTRY)
        .ok_or_else(|| Error::Malformed("missing embedding table".into()))?;
    let emb = EmbeddingTable::new(emb.1.clone())?;
    if emb.vocab_size() != meta.vocab.len() || emb.dim() != meta.model.d1 {
        return Err(Error::Malformed(
            "embedding table shape disagrees with metadata".into(),
        ));
    }
    Ok(Checkpoint { model, emb, meta })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
