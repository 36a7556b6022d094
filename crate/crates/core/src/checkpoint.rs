//! Versioned binary checkpoint: config, named tensors, optimizer moments, RNG state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CCDD" | version u32 | config: u32 len + UTF-8 | config hash [32]
//! tensors:   u32 count, then per tensor: u32 name len + name | dtype u8 | rank u32 | dims u32* | payload
//! optimizer: u64 step | u32 count | moment tensors (m.<param>, v.<param>)
//! rng:       u64 seed | u64 cursor
//! step u64
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64. Writers emit f64 so resumed training is bit-exact.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::params::Tensor;

pub const MAGIC: &[u8; 4] = b"CCDD";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes: not a checkpoint file")]
    BadMagic,
    #[error("version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload")]
    Truncated,
    #[error("config mismatch: checkpoint was written with different values for {0}")]
    ConfigMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint required")]
    Required,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_hash: [u8; 32],
    pub tensors: Vec<NamedTensor>,
    pub optimizer_step: u64,
    pub optimizer_moments: Vec<NamedTensor>,
    pub rng_seed: u64,
    pub rng_cursor: u64,
    pub step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[NamedTensor]) {
    put_u32(out, tensors.len() as u32);
    for t in tensors {
        put_str(out, &t.name);
        out.push(DTYPE_F64);
        put_u32(out, t.tensor.shape.len() as u32);
        for &d in &t.tensor.shape {
            put_u32(out, d as u32);
        }
        for v in &t.tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("string is not UTF-8".into()))
    }

    fn tensors(&mut self) -> Result<Vec<NamedTensor>, CheckpointError> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = self.string()?;
            let dtype = self.u8()?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
            let data = match dtype {
                DTYPE_F64 => {
                    let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
                    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
                }
                DTYPE_F32 => {
                    let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
                    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
                }
                other => return Err(CheckpointError::Malformed(format!("unknown dtype tag {other} for tensor {name}"))),
            };
            out.push(NamedTensor { name, tensor: Tensor { shape, data } });
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&self.config_hash);
        put_tensors(&mut out, &self.tensors);
        put_u64(&mut out, self.optimizer_step);
        put_tensors(&mut out, &self.optimizer_moments);
        put_u64(&mut out, self.rng_seed);
        put_u64(&mut out, self.rng_cursor);
        put_u64(&mut out, self.step);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4).map_err(|_| CheckpointError::BadMagic)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: VERSION });
        }
        let config_text = r.string()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let tensors = r.tensors()?;
        let optimizer_step = r.u64()?;
        let optimizer_moments = r.tensors()?;
        let rng_seed = r.u64()?;
        let rng_cursor = r.u64()?;
        let step = r.u64()?;
        if r.pos != buf.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { config_text, config_hash, tensors, optimizer_step, optimizer_moments, rng_seed, rng_cursor, step })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> crate::Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }
}
