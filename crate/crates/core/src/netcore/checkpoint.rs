//! Binary checkpoint container.
//!
//! Layout (little-endian): `"GLCK"`, version `u32`, tensor count `u32`, then per
//! tensor: name length `u32`, name bytes, rank `u32`, dims `u32 × rank`, `f32`
//! data. A `u32`-length-prefixed UTF-8 manifest of `key=value` lines follows.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{AdamW, Ema, ParamStore, Real, Tensor};

const MAGIC: &[u8; 4] = b"GLCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint lacks {0}")]
    Missing(String),
}

/// Named tensors plus a text manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub manifest: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.manifest.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.manifest.get(key).map(String::as_str)
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self
            .get(key)
            .ok_or_else(|| CheckpointError::Missing(key.to_string()))?;
        raw.parse()
            .map_err(|_| CheckpointError::Corrupt(format!("{key}={raw}")))
    }

    /// Adds every parameter of `store` under `prefix`.
    pub fn put_store<F: Real>(&mut self, prefix: &str, store: &ParamStore<F>) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.cast()));
        }
    }

    /// Fills `store` from tensors under `prefix`; every parameter must be present.
    pub fn load_store<F: Real>(&self, prefix: &str, store: &mut ParamStore<F>) -> Result<(), CheckpointError> {
        for id in store.ids().collect::<Vec<_>>() {
            let key = format!("{prefix}{}", store.name(id));
            let t = self.tensor(&key).ok_or(CheckpointError::Missing(key.clone()))?;
            if t.shape() != store.get(id).shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "{key}: shape {:?}, expected {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.cast();
        }
        Ok(())
    }

    pub fn put_optimizer<F: Real>(&mut self, prefix: &str, opt: &AdamW<F>, store: &ParamStore<F>) {
        for ((name, _), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
            self.tensors.push((format!("{prefix}m.{name}"), m.cast()));
            self.tensors.push((format!("{prefix}v.{name}"), v.cast()));
        }
        self.set(&format!("{prefix}t"), opt.t);
    }

    pub fn load_optimizer<F: Real>(
        &self,
        prefix: &str,
        opt: &mut AdamW<F>,
        store: &ParamStore<F>,
    ) -> Result<(), CheckpointError> {
        for (i, (name, p)) in store.iter().enumerate() {
            for (slot, tag) in [(&mut opt.m[i], "m"), (&mut opt.v[i], "v")] {
                let key = format!("{prefix}{tag}.{name}");
                let t = self.tensor(&key).ok_or(CheckpointError::Missing(key.clone()))?;
                if t.shape() != p.shape() {
                    return Err(CheckpointError::Corrupt(key));
                }
                *slot = t.cast();
            }
        }
        opt.t = self.get_parsed(&format!("{prefix}t"))?;
        Ok(())
    }

    pub fn put_ema<F: Real>(&mut self, prefix: &str, ema: &Ema<F>) {
        self.put_store(prefix, &ema.shadow);
        self.set(&format!("{prefix}step"), ema.step);
    }

    pub fn load_ema<F: Real>(&self, prefix: &str, ema: &mut Ema<F>) -> Result<(), CheckpointError> {
        self.load_store(prefix, &mut ema.shadow)?;
        ema.step = self.get_parsed(&format!("{prefix}step"))?;
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, ck.tensors.len() as u32);
    for (name, t) in &ck.tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest: String = ck
        .manifest
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    put_u32(&mut out, manifest.len() as u32);
    out.extend_from_slice(manifest.as_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let dims = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: dims overflow")))?;
        let data = c
            .take(n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        tensors.push((name, t));
    }
    let mlen = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(mlen)?)
        .map_err(|_| CheckpointError::Corrupt("manifest is not UTF-8".into()))?;
    let mut manifest = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Corrupt(format!("manifest line {line:?}")))?;
        manifest.insert(k.to_string(), v.to_string());
    }
    if c.pos != buf.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint { tensors, manifest })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(ck))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}
