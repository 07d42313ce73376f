//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!   magic "UGNN" | version u32 | config_len u64 | config text (UTF-8)
//!   | tensor_count u32 | per tensor: name_len u32, name, rank u32,
//!     dims u64 x rank, payload f32 LE
//!   | optimizer flag u8 | if 1: step u64, then per tensor m and v payloads
//!   | epoch u64
//!
//! Tensor payloads are always 32-bit floats on disk, whatever the engine's
//! scalar mode.

use std::io::{Read, Write};
use std::path::Path;

use ugnn_core::model::{Model, UNetGnnParams};
use ugnn_core::{Error, Real, Result, Tensor};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"UGNN";
pub const VERSION: u32 = 1;

/// Optimizer moments aligned with the checkpoint's tensor table.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimSnapshot {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// (name, dims, payload) in canonical parameter order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub optimizer: Option<OptimSnapshot>,
    pub epoch: u64,
}

pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    params: &UNetGnnParams,
    optimizer: Option<&OptimSnapshot>,
    epoch: u64,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let config_text = config.serialize();
    buf.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());

    let named = params.named_tensors();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    match optimizer {
        Some(state) => {
            if state.m.len() != named.len() || state.v.len() != named.len() {
                return Err(Error::Format(format!(
                    "optimizer state covers {} tensors, params have {}",
                    state.m.len(),
                    named.len()
                )));
            }
            buf.push(1);
            buf.extend_from_slice(&state.step.to_le_bytes());
            for (i, (_, t)) in named.iter().enumerate() {
                for vecs in [&state.m[i], &state.v[i]] {
                    if vecs.len() != t.numel() {
                        return Err(Error::Format(
                            "optimizer moment length mismatch".to_string(),
                        ));
                    }
                    for &v in vecs.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        None => buf.push(0),
    }
    buf.extend_from_slice(&epoch.to_le_bytes());

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };

    if cur.take(4)? != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, not a checkpoint",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let config_len = cur.u64()? as usize;
    let config_text = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|_| Error::Format("checkpoint config is not UTF-8".to_string()))?;
    let config = RunConfig::parse(config_text, None)?;

    let tensor_count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".to_string()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64()? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = cur.f32s(numel)?;
        tensors.push((name, dims, payload));
    }

    let optimizer = match cur.take(1)?[0] {
        0 => None,
        1 => {
            let step = cur.u64()?;
            let mut m = Vec::with_capacity(tensor_count);
            let mut v = Vec::with_capacity(tensor_count);
            for (_, dims, _) in &tensors {
                let numel: usize = dims.iter().product();
                m.push(cur.f32s(numel)?);
                v.push(cur.f32s(numel)?);
            }
            Some(OptimSnapshot { step, m, v })
        }
        other => {
            return Err(Error::Format(format!(
                "bad optimizer flag {other} in checkpoint"
            )))
        }
    };
    let epoch = cur.u64()?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - cur.pos
        )));
    }

    Ok(Checkpoint {
        config,
        tensors,
        optimizer,
        epoch,
    })
}

impl Checkpoint {
    /// Copies the tensor table into parameters, matching by canonical name
    /// and validating shapes. Mismatches name the offending tensor.
    pub fn restore_into(&self, params: &mut UNetGnnParams) -> Result<()> {
        let mut named = params.named_tensors_mut();
        if named.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for ((want_name, slot), (name, dims, payload)) in named.iter_mut().zip(&self.tensors) {
            if want_name != name {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name:?} where model expects {want_name:?}"
                )));
            }
            if slot.shape() != dims.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor {name}: checkpoint shape {:?} vs model shape {:?}",
                    dims,
                    slot.shape()
                )));
            }
            let data: Vec<Real> = payload.iter().map(|&v| v as Real).collect();
            let flags = slot.tracks_grad();
            **slot = Tensor::new(dims, data)?.requires_grad(flags);
        }
        Ok(())
    }

    /// Rebuilds the model this checkpoint was saved from.
    pub fn build_model(&self) -> Result<Model> {
        self.config.validate()?;
        let mut params = ugnn_core::model::init_params(&self.config.model, 0)?;
        self.restore_into(&mut params)?;
        Model::new(self.config.model.clone(), params)
    }
}
