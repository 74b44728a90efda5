//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "COITCKPT"
//! version      u32       FORMAT_VERSION
//! header_len   u32       byte length of the JSON header
//! header       JSON      Header (config, vocab, epoch, dev metrics, tensor index)
//! payload      f32 × N   parameter values; tensor i occupies
//!                        payload[offset_i .. offset_i + len_i] in row-major order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"COITCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// In f32 elements from the start of the payload.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub config_hash: String,
    pub vocab: Vocab,
    pub epoch: usize,
    pub dev: Option<EvalReport>,
    pub tensors: Vec<TensorEntry>,
}

/// Training metadata stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub dev: Option<EvalReport>,
}

pub fn write_checkpoint(mut w: impl Write, model: &Model<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        let len = p.value.numel();
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let header = Header {
        config: model.config.clone(),
        config_hash: model.config.hash(),
        vocab: model.vocab.clone(),
        epoch: meta.epoch,
        dev: meta.dev.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;

    let mut buf = Vec::with_capacity(16 + json.len() + 4 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for x in p.value.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(Model<f32>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let truncated = || Error::Checkpoint("file is truncated".into());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(16..16 + header_len).ok_or_else(truncated)?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let payload = &bytes[16 + header_len..];

    let mut model = Model::<f32>::new(header.config.clone(), header.vocab.clone(), None)?;
    if header.tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, the configured model has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    for entry in &header.tensors {
        let param = model
            .store
            .by_name_mut(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", entry.name)))?;
        if param.value.shape() != entry.shape.as_slice() || entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::Checkpoint(format!("shape mismatch for `{}`", entry.name)));
        }
        let raw = payload.get(4 * entry.offset..4 * (entry.offset + entry.len)).ok_or_else(truncated)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        param.value = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok((
        model,
        CheckpointMeta {
            epoch: header.epoch,
            dev: header.dev,
        },
    ))
}

pub fn save(path: &Path, model: &Model<f32>, meta: &CheckpointMeta) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(file), model, meta)
}

pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
