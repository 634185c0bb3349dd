// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint container.
//!
//! ```text
//! "EMSH"  version:u32  count:u32
//! count × { name_len:u32  name:utf8  dtype:u8  rank:u32  dims:u64×rank  offset:u64 }
//! payload: little-endian f32 values, tensors back to back (offsets are
//!          relative to the start of the payload)
//! meta_len:u64  meta: JSON document
//! ```
//!
//! All integers are little-endian. Backbone tensors carry their parameter
//! names (`tok_emb`, `layers.0.attn.wq`, …); the steering bank adds
//! `steer.W.<e>` and a rank-0 `steer.epsilon`. Nothing time-dependent is
//! stored, so saving is a pure function of the checkpoint and
//! save → load → save reproduces the same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerParams};
use crate::steer::SteerBank;
use crate::tensor::{Scalar, Tensor};
use crate::training::{CheckpointMeta, TrainedCheckpoint};

pub const MAGIC: &[u8; 4] = b"EMSH";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaDocument {
    model: ModelConfig,
    checkpoint: CheckpointMeta,
}

/// SHA-256 over the names, shapes and values of every backbone tensor.
pub fn backbone_hash(params: &TransformerParams<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.weights.named() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn named_tensors(ckpt: &TrainedCheckpoint) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> = ckpt
        .params
        .weights
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    if let Some(bank) = &ckpt.steer {
        for (e, w) in bank.weights().iter().enumerate() {
            out.push((format!("steer.W.{e}"), w.clone()));
        }
        out.push(("steer.epsilon".into(), Tensor::scalar(bank.epsilon() as f32)));
    }
    out
}

pub fn to_bytes(ckpt: &TrainedCheckpoint) -> Result<Vec<u8>> {
    let tensors = named_tensors(ckpt);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(f32::DTYPE_CODE);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    for (_, t) in &tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let meta = MetaDocument {
        model: ckpt.params.config.clone(),
        checkpoint: ckpt.meta.clone(),
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size does not fit in memory".into()))
    }
}

struct Record {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != f32::DTYPE_CODE {
            return Err(Error::Format(format!(
                "tensor {name} has unsupported dtype code {dtype}"
            )));
        }
        let rank = r.u32()? as usize;
        if rank > 2 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let offset = r.usize()?;
        records.push(Record { name, shape, offset });
    }
    let payload_len: usize = records.iter().map(|rec| 4 * rec.shape.iter().product::<usize>()).sum();
    let payload = r.take(payload_len)?;
    let mut expected = 0;
    let mut tensors = Vec::with_capacity(records.len());
    for rec in &records {
        let n: usize = rec.shape.iter().product();
        if rec.offset != expected {
            return Err(Error::Format(format!(
                "tensor {} at offset {}, expected {expected}",
                rec.name, rec.offset
            )));
        }
        let data = payload[expected..expected + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        expected += 4 * n;
        let t = Tensor::new(&rec.shape, data).map_err(|e| Error::Format(format!("tensor {}: {e}", rec.name)))?;
        tensors.push((rec.name.as_str(), t));
    }
    let meta_len = r.usize()?;
    let meta: MetaDocument =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut params = TransformerParams::<f32>::init(&meta.model, 0)
        .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
    let names: Vec<String> = params.weights.named().into_iter().map(|(n, _)| n).collect();
    let mut tensors = tensors.into_iter();
    for (name, slot) in names.iter().zip(params.weights.refs_mut()) {
        let (got, t) = tensors
            .next()
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if got != name || t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "expected tensor {name} {:?}, found {got} {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
    }
    let rest: Vec<(&str, Tensor<f32>)> = tensors.collect();
    let steer = if rest.is_empty() {
        None
    } else {
        let (eps_name, eps) = rest.last().expect("non-empty");
        if *eps_name != "steer.epsilon" || !eps.shape().is_empty() {
            return Err(Error::Format(
                "steering tensors must end with a scalar steer.epsilon".into(),
            ));
        }
        let mut weights = Vec::new();
        for (e, (name, t)) in rest[..rest.len() - 1].iter().enumerate() {
            if *name != format!("steer.W.{e}") {
                return Err(Error::Format(format!("unexpected tensor {name}")));
            }
            weights.push(t.clone());
        }
        // The metadata keeps ε at full precision; the tensor mirrors it.
        let epsilon = meta.checkpoint.train.epsilon;
        if epsilon as f32 != eps.item() {
            return Err(Error::Format(format!(
                "steer.epsilon {} disagrees with the recorded epsilon {epsilon}",
                eps.item()
            )));
        }
        let bank = SteerBank::new(weights, epsilon)?;
        if bank.n_emotions() != meta.model.n_emotions || bank.d_model() != meta.model.d_model {
            return Err(Error::Format("steering bank does not fit the model".into()));
        }
        Some(bank)
    };
    if steer.is_some() != meta.checkpoint.regime.has_steering() {
        return Err(Error::Format(format!(
            "{} checkpoint {} steering tensors",
            meta.checkpoint.regime,
            if steer.is_some() {
                "must not carry"
            } else {
                "is missing its"
            }
        )));
    }
    let ckpt = TrainedCheckpoint {
        params,
        steer,
        meta: meta.checkpoint,
    };
    if backbone_hash(&ckpt.params) != ckpt.meta.backbone_hash {
        return Err(Error::Format("backbone hash does not match the stored tensors".into()));
    }
    Ok(ckpt)
}

pub fn save(ckpt: &TrainedCheckpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
