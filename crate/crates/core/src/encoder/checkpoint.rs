//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        16 bytes  "CLEAR-ADAPTER\0\0\0"
//! version      u32
//! step         u64
//! rng seed     u64
//! rng word pos u128
//! config hash  u32 length + utf-8 bytes
//! n tensors    u32
//! per tensor:  u32 name length + utf-8 name, u32 ndim, ndim × u64 dims,
//!              prod(dims) × f64
//! ```
//!
//! Tensors are the adapter weights (`w1 b1 w2 b2 alpha`), then the first
//! Adam moments (`m.*`) and second moments (`v.*`) in the same order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Matrix;

use super::AdapterParams;

pub const CHECKPOINT_MAGIC: &[u8; 16] = b"CLEAR-ADAPTER\0\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: AdapterParams,
    pub adam_m: AdapterParams,
    pub adam_v: AdapterParams,
    pub step: u64,
    pub config_hash: String,
    pub rng: RngState,
}

impl Checkpoint {
    /// Fresh optimizer state for `params`.
    pub fn new(params: AdapterParams, config_hash: impl Into<String>, rng: RngState) -> Self {
        Self {
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            params,
            step: 0,
            config_hash: config_hash.into(),
            rng,
        }
    }

    pub fn ensure_config(&self, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::IncompatibleCheckpoint(format!(
                "config hash {} does not match {}",
                self.config_hash, config_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        write_str(&mut out, &self.config_hash);

        let groups = [("", &self.params), ("m.", &self.adam_m), ("v.", &self.adam_v)];
        out.extend_from_slice(&(groups.len() as u32 * 5).to_le_bytes());
        for (prefix, p) in groups {
            let (d, h) = (p.dim(), p.hidden());
            let shapes: [&[usize]; 5] = [&[h, d], &[h], &[d, h], &[d], &[]];
            for ((name, data), dims) in p.tensors().into_iter().zip(shapes) {
                write_str(&mut out, &format!("{prefix}{name}"));
                out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
                for &n in dims {
                    out.extend_from_slice(&(n as u64).to_le_bytes());
                }
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(16)? != CHECKPOINT_MAGIC {
            return Err(incompatible("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(incompatible(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let seed = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let config_hash = r.string()?;

        let count = r.u32()?;
        let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 2 {
                return Err(incompatible(format!("tensor {name} has {ndim} dims")));
            }
            let dims = (0..ndim)
                .map(|_| r.u64().map(|n| n as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &n| acc.checked_mul(n))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| incompatible("truncated"))?;
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if tensors.insert(name.clone(), (dims, data)).is_some() {
                return Err(incompatible(format!("duplicate tensor {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(incompatible(format!("{} trailing bytes", r.remaining())));
        }

        let params = take_group(&mut tensors, "")?;
        let adam_m = take_group(&mut tensors, "m.")?;
        let adam_v = take_group(&mut tensors, "v.")?;
        if let Some(name) = tensors.keys().next() {
            return Err(incompatible(format!("unexpected tensor {name}")));
        }
        for p in [&adam_m, &adam_v] {
            if p.dim() != params.dim() || p.hidden() != params.hidden() {
                return Err(incompatible("optimizer moments do not match parameter shapes"));
            }
        }
        Ok(Self {
            params,
            adam_m,
            adam_v,
            step,
            config_hash,
            rng: RngState { seed, word_pos },
        })
    }
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint(msg.into())
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(incompatible("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| incompatible("invalid utf-8 name"))
    }
}

fn take_group(
    tensors: &mut HashMap<String, (Vec<usize>, Vec<f64>)>,
    prefix: &str,
) -> Result<AdapterParams> {
    let mut get = |name: &str, ndim: usize| -> Result<(Vec<usize>, Vec<f64>)> {
        let key = format!("{prefix}{name}");
        let t = tensors
            .remove(&key)
            .ok_or_else(|| incompatible(format!("missing tensor {key}")))?;
        if t.0.len() != ndim {
            return Err(incompatible(format!("tensor {key} has {} dims", t.0.len())));
        }
        Ok(t)
    };
    let (w1_dims, w1) = get("w1", 2)?;
    let (_, b1) = get("b1", 1)?;
    let (w2_dims, w2) = get("w2", 2)?;
    let (_, b2) = get("b2", 1)?;
    let (_, alpha) = get("alpha", 0)?;
    let p = AdapterParams {
        w1: Matrix::from_raw(w1_dims[0], w1_dims[1], w1),
        b1,
        w2: Matrix::from_raw(w2_dims[0], w2_dims[1], w2),
        b2,
        alpha: alpha[0],
    };
    p.validate().map_err(|e| incompatible(e.to_string()))?;
    Ok(p)
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint and checks it was written under `config_hash`.
pub fn load_checkpoint(path: &Path, config_hash: &str) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    ckpt.ensure_config(config_hash)?;
    Ok(ckpt)
}
