//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! `"NVLCKPT1"`, 32-byte config hash, `u32` entry count, then per entry
//! `u32` name length, name bytes, `u32` rank, `u32` dims, `f64` values;
//! finally a CRC32 of everything before it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::Params;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NVLCKPT1";
const HASH_LEN: usize = 32;
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;
const WHAT: &str = "checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Pretrain1,
    Pretrain2,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pretrain1, Stage::Pretrain2, Stage::Finetune];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain1 => "pretrain1",
            Stage::Pretrain2 => "pretrain2",
            Stage::Finetune => "finetune",
        }
    }

    fn code(self) -> f64 {
        match self {
            Stage::Pretrain1 => 1.0,
            Stage::Pretrain2 => 2.0,
            Stage::Finetune => 3.0,
        }
    }

    fn from_code(v: f64) -> Option<Self> {
        Stage::ALL.into_iter().find(|s| s.code() == v)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// Parameters, optimizer state and bookkeeping for one training stage.
/// Tensor names are dotted paths (`enhancer.blstm0.fwd.w_ih`,
/// `optim.<param>.sq`, `stats.noisy.mu`, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; HASH_LEN],
    pub stage: Stage,
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config_hash: [u8; HASH_LEN], stage: Stage, step: u64) -> Self {
        Self {
            config_hash,
            stage,
            step,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t.with_requires_grad(false));
    }

    pub fn insert_params(&mut self, p: &Params) {
        for (name, t) in p.iter() {
            self.insert(name, t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Fills `p` from the matching entries.
    pub fn load_params(&self, p: &mut Params) -> Result<()> {
        let view = self.tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
        p.load_from(&view)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = [
            ("meta.stage".to_string(), Tensor::vector(vec![self.stage.code()])),
            ("meta.step".to_string(), Tensor::vector(vec![self.step as f64])),
        ];
        let entries: Vec<(&String, &Tensor)> = meta
            .iter()
            .map(|(k, v)| (k, v))
            .chain(self.tensors.iter().filter(|(k, _)| !k.starts_with("meta.")))
            .collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let min = MAGIC.len() + HASH_LEN + 4 + 4;
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format(WHAT, "bad magic"));
        }
        if bytes.len() < min {
            return Err(Error::Integrity {
                what: WHAT,
                detail: format!("truncated: {} bytes", bytes.len()),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Integrity {
                what: WHAT,
                detail: format!("crc32 {actual:08x} does not match stored {stored:08x}"),
            });
        }

        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let config_hash: [u8; HASH_LEN] = r.take(HASH_LEN)?.try_into().unwrap();
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            if name_len == 0 || name_len > MAX_NAME {
                return Err(Error::format(WHAT, format!("entry name length {name_len}")));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(WHAT, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(Error::format(WHAT, format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| Error::format(WHAT, format!("{name}: shape {shape:?} exceeds file")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::format(WHAT, format!("duplicate entry {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format(WHAT, format!("{} trailing bytes", r.remaining())));
        }
        let scalar = |key: &str| {
            tensors
                .get(key)
                .and_then(|t: &Tensor| (t.numel() == 1).then(|| t.data()[0]))
                .ok_or_else(|| Error::format(WHAT, format!("missing {key}")))
        };
        let stage = Stage::from_code(scalar("meta.stage")?)
            .ok_or_else(|| Error::format(WHAT, "unknown stage code"))?;
        let step = scalar("meta.step")?;
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::format(WHAT, "invalid step"));
        }
        tensors.remove("meta.stage");
        tensors.remove("meta.step");
        Ok(Self {
            config_hash,
            stage,
            step: step as u64,
            tensors,
        })
    }

    /// Writes via a temporary sibling and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::file(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::decode(&bytes)
    }

    /// Hex SHA-256 of the encoded file.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(WHAT, "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
