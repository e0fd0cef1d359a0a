//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `"AIMC"`, `u32` version, `u32` JSON length, JSON metadata, `u32` tensor
//! count, then per tensor `u32` name length, UTF-8 name, `u32` rank, `u32`
//! dims, `f32` values; finally a CRC32 of every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PatchTokenizer;
use crate::model::{attach_lora, init_model, ModelSpec, ModelState};
use crate::numerics::Tensor;
use crate::trainer::optim::{AdamWConfig, OptimizerState};
use crate::trainer::pretrain::PretrainConfig;
use crate::trainer::TrainError;

const MAGIC: &[u8; 4] = b"AIMC";
pub const CHECKPOINT_VERSION: u32 = 1;
const CODEBOOK: &str = "tokenizer.codebook";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    /// Completed training steps.
    pub step: u64,
    pub optimizer: Option<AdamWConfig>,
    pub optimizer_step: u64,
    /// Cumulative training FLOP estimate at `step`.
    #[serde(default)]
    pub flops: f64,
    /// Full pre-training configuration, including data-pipeline seeds.
    pub pretrain: Option<PretrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub state: ModelState<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub tokenizer: Option<PatchTokenizer<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) -> Result<(), TrainError> {
    let v = u32::try_from(v).map_err(|_| TrainError::InvalidConfig(format!("length {v} exceeds u32")))?;
    put_u32(out, v);
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<(), TrainError> {
    put_len(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_len(out, t.rank())?;
    for &d in t.shape() {
        put_len(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes a checkpoint to bytes.
pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, TrainError> {
    let mut tensors: Vec<(String, &Tensor<f32>)> =
        ckpt.state.params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    if let Some(opt) = &ckpt.optimizer {
        for (p, (m, v)) in ckpt.state.params.iter().zip(opt.m.iter().zip(&opt.v)) {
            tensors.push((format!("adam.m/{}", p.name), m));
            tensors.push((format!("adam.v/{}", p.name), v));
        }
    }
    if let Some(tok) = &ckpt.tokenizer {
        tensors.push((CODEBOOK.to_string(), tok.codebook()));
    }
    let json = serde_json::to_vec(&ckpt.meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_len(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_len(&mut out, tensors.len())?;
    for (name, t) in &tensors {
        put_tensor(&mut out, name, t)?;
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::CorruptPayload("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize, TrainError> {
        Ok(self.u32()? as usize)
    }
}

/// Parses and verifies checkpoint bytes, rebuilding the model from its
/// stored configuration.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(TrainError::BadMagic);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(TrainError::CorruptPayload("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let json_len = r.len()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)?;
    let count = r.len()?;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| TrainError::CorruptPayload("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| TrainError::CorruptPayload(format!("{name}: shape overflows")))?;
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| TrainError::CorruptPayload("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| TrainError::CorruptPayload(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(TrainError::CorruptPayload(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(TrainError::CorruptPayload("trailing bytes".into()));
    }

    let mut state: ModelState<f32> = init_model(&meta.model.config, 0)?;
    if let Some(lora) = &meta.model.lora {
        attach_lora(&mut state, lora.clone(), 0)?;
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>, TrainError> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| TrainError::CheckpointMismatch(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(TrainError::CheckpointMismatch(format!(
                "{name} has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    for p in state.params.iter_mut() {
        p.value = take(&p.name, p.value.shape())?;
    }
    let optimizer = match meta.optimizer {
        None => None,
        Some(config) => {
            let mut opt = OptimizerState::new(config, &state.params)?;
            opt.step = meta.optimizer_step;
            for (i, p) in state.params.iter().enumerate() {
                opt.m[i] = take(&format!("adam.m/{}", p.name), p.value.shape())?;
                opt.v[i] = take(&format!("adam.v/{}", p.name), p.value.shape())?;
            }
            Some(opt)
        }
    };
    let tokenizer = match tensors.remove(CODEBOOK) {
        Some(book) => Some(PatchTokenizer::from_codebook(book)?),
        None => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(TrainError::CheckpointMismatch(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        meta,
        state,
        optimizer,
        tokenizer,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let bytes = write_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    read_checkpoint(&fs::read(path)?)
}
