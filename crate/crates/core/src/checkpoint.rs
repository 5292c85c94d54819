//! Bit-exact model checkpoints: a config echo plus a named tensor table.
//!
//! Layout (little-endian): magic "MOWC", format version u32, config text
//! (len u32 + UTF-8 bytes), tensor count u32, then per tensor name length
//! u16 + name bytes, rank u8, dims u32×rank, f32 payload.

use mowm_autograd::{ParamStore, Tensor};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const CKPT_MAGIC: [u8; 4] = *b"MOWC";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?}: expected dims {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Model-parameter entries (everything not under the optimizer prefix).
    pub fn param_tensors(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.tensors.iter().filter(|(n, _)| !n.starts_with("opt."))
    }

    /// Optimizer-state entries ("opt.t", "opt.m.*", "opt.v.*").
    pub fn optimizer_tensors(&self) -> Vec<(String, Tensor)> {
        self.tensors.iter().filter(|(n, _)| n.starts_with("opt.")).cloned().collect()
    }

    /// Copies parameter tensors into `store`, by name.  Every store
    /// parameter must be present with matching dims; the first offense is
    /// reported by name with both shapes.
    pub fn apply_to_store(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.sorted_names().iter().map(|s| s.to_string()).collect();
        for name in names {
            let found = self
                .get(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            let expected = store.get_by_name(&name).unwrap().shape().to_vec();
            if found.shape() != expected.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected,
                    found: found.shape().to_vec(),
                });
            }
            store.load(&name, found.clone()).expect("shape already checked");
        }
        Ok(())
    }
}

/// Snapshot of a store's parameters as named tensors, sorted by name.
pub fn store_to_named(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .sorted_names()
        .iter()
        .map(|n| (n.to_string(), store.get_by_name(n).unwrap().clone()))
        .collect()
}

pub fn save_checkpoint(path: &Path, config: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    for (i, (name, _)) in tensors.iter().enumerate() {
        if tensors[..i].iter().any(|(n, _)| n == name) {
            return Err(CheckpointError::DuplicateName(name.clone()));
        }
        if name.len() > u16::MAX as usize {
            return Err(CheckpointError::Malformed(format!("name too long: {name:?}")));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated { needed: self.pos + n, have: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor { buf: &bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic, expected: CKPT_MAGIC });
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: CKPT_VERSION });
    }
    let config_len = c.u32()? as usize;
    let config = String::from_utf8(c.take(config_len)?.to_vec())
        .map_err(|e| CheckpointError::Malformed(format!("config not UTF-8: {e}")))?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::Malformed(format!("name not UTF-8: {e}")))?;
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(4 * n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("tensor {name:?}: {e}")))?;
        if tensors.iter().any(|(existing, _): &(String, Tensor)| *existing == name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        tensors.push((name, tensor));
    }
    Ok(Checkpoint { config, tensors })
}
