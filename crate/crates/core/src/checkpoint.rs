//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "LCTC"  version:u32  count:u64  tensor*count          model tensors
//!                      count:u64  tensor*count          optimizer buffers
//! seed:u64  counter:u128  epoch:u64                     training state
//! crc32:u32                                             over every preceding byte
//!
//! tensor = name_len:u32 name:utf8 rank:u32 dims:u64*rank payload:f32*prod(dims)
//! ```
//!
//! Optimizer buffers are stored under the [`OPTIMIZER_PREFIX`] name prefix.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngState;

pub const MAGIC: [u8; 4] = *b"LCTC";
pub const VERSION: u32 = 1;
pub const OPTIMIZER_PREFIX: &str = "__momentum__/";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Self {
        NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        }
    }

    /// Bitwise equality, so that `-0.0` and NaN payloads compare exactly.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    /// Stored without the reserved prefix.
    pub optimizer: Vec<NamedTensor>,
    pub rng: RngState,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn empty() -> Self {
        Checkpoint {
            tensors: Vec::new(),
            optimizer: Vec::new(),
            rng: RngState {
                seed: 0,
                counter: 0,
            },
            epoch: 0,
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let same = |a: &[NamedTensor], b: &[NamedTensor]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
        };
        same(&self.tensors, &other.tensors)
            && same(&self.optimizer, &other.optimizer)
            && self.rng == other.rng
            && self.epoch == other.epoch
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_section(&mut out, &self.tensors, "");
        write_section(&mut out, &self.optimizer, OPTIMIZER_PREFIX);
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.counter.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let tensors = read_section(&mut r, "")?;
        let optimizer = read_section(&mut r, OPTIMIZER_PREFIX)?;
        let seed = r.u64()?;
        let counter = u128::from_le_bytes(r.take(16)?.try_into().expect("sixteen bytes"));
        let epoch = r.u64()?;
        let computed = crc32fast::hash(&bytes[..r.pos]);
        let stored = r.u32()?;
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        if r.pos != bytes.len() {
            return Err(Error::config(
                "checkpoint",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Checkpoint {
            tensors,
            optimizer,
            rng: RngState { seed, counter },
            epoch,
        })
    }
}

fn write_section(out: &mut Vec<u8>, tensors: &[NamedTensor], prefix: &str) {
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        let name = format!("{prefix}{}", t.name);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Truncated(self.pos as u64))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("four bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("eight bytes"),
        ))
    }
}

fn read_section(r: &mut Reader<'_>, prefix: &str) -> Result<Vec<NamedTensor>> {
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| {
            Error::config(
                "checkpoint",
                format!("tensor name at byte {at} is not UTF-8"),
            )
        })?;
        let name = name
            .strip_prefix(prefix)
            .ok_or_else(|| {
                Error::config(
                    "checkpoint",
                    format!("tensor `{name}` lacks prefix `{prefix}`"),
                )
            })?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(Error::Truncated(r.pos as u64))?;
        let payload = r.take(n)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
