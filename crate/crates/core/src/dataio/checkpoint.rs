//! Checkpoint container.
//!
//! ```text
//! "MOLFCKPT"                       8 bytes
//! format version                   u32 LE (1)
//! stage                            u8 (0 = vae, 1 = flow)
//! config length, config text       u32 LE, UTF-8 key=value lines
//! tensor count                     u32 LE
//! per tensor:
//!   name length, name              u32 LE, UTF-8
//!   group                          u8 (0 = backbone, 1 = gate)
//!   rank, dims                     u32 LE, u64 LE each
//!   values                         f32 LE, row-major
//! SHA-256 of all preceding bytes   32 bytes
//! ```

use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{ParamGroup, ParamStore, Tensor};
use crate::config::KvMap;
use crate::error::{MolfError, Result};

use super::write_atomic;

pub const CKPT_MAGIC: &[u8; 8] = b"MOLFCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Vae,
    Flow,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Vae => "vae",
            Stage::Flow => "flow",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: KvMap,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.push(match self.stage {
            Stage::Vae => 0,
            Stage::Flow => 1,
        });
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        let entries = self.params.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.group {
                ParamGroup::Backbone => 0,
                ParamGroup::Gate => 1,
            });
            out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| MolfError::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < CKPT_MAGIC.len() + 32 || &bytes[..8] != CKPT_MAGIC {
            return Err(corrupt("not a checkpoint (bad magic or truncated)"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32().ok_or_else(|| corrupt("truncated"))?;
        if version != CKPT_VERSION {
            return Err(corrupt("unsupported checkpoint version"));
        }
        let stage = match r.u8().ok_or_else(|| corrupt("truncated"))? {
            0 => Stage::Vae,
            1 => Stage::Flow,
            _ => return Err(corrupt("unknown stage tag")),
        };
        let cfg_len = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
        let cfg = std::str::from_utf8(r.take(cfg_len).ok_or_else(|| corrupt("truncated"))?)
            .map_err(|_| corrupt("config is not UTF-8"))?;
        let config = KvMap::parse(cfg).map_err(|_| corrupt("config does not parse"))?;
        let count = r.u32().ok_or_else(|| corrupt("truncated"))?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
            let name = std::str::from_utf8(r.take(n).ok_or_else(|| corrupt("truncated"))?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let group = match r.u8().ok_or_else(|| corrupt("truncated"))? {
                0 => ParamGroup::Backbone,
                1 => ParamGroup::Gate,
                _ => return Err(corrupt("unknown parameter group")),
            };
            let rank = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(|| corrupt("truncated"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4).ok_or_else(|| corrupt("truncated"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let value = Tensor::new(shape, data).map_err(|_| corrupt("bad tensor shape"))?;
            params.add(name, value, group);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes before checksum"));
        }
        if stage == Stage::Vae {
            params.freeze();
        }
        Ok(Checkpoint { stage, config, params })
    }

    /// Fails with a configuration error if the stage differs.
    pub fn expect_stage(self, stage: Stage) -> Result<Self> {
        if self.stage != stage {
            return Err(MolfError::Config(format!(
                "expected a {stage} checkpoint, found a {} checkpoint",
                self.stage
            )));
        }
        Ok(self)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.encode())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => MolfError::Config(format!("checkpoint {} does not exist", path.display())),
        _ => MolfError::io(path, e),
    })?;
    Checkpoint::decode(&bytes, path)
}
