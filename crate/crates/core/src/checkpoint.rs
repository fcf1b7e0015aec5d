//! Checkpoint file format.
//!
//! Byte layout, little-endian throughout:
//! `"PVLR"` magic (4 bytes), format version `u32`, config JSON as `u32`
//! length + UTF-8 bytes, tensor count `u32`, then per tensor: name length
//! `u16` + UTF-8 name, rank `u8`, dims as `u64` each, values as `f64` each.
//!
//! `load(save(state))` is bit-identical. Live parameters, EMA shadows, and
//! optimizer moments are all stored as named tensors (`ema.*`, `opt.m.*`,
//! `opt.v.*`) so a resumed run continues exactly where it stopped.

use crate::error::{Error, Result};
use crate::optim::{AdamWState, EmaState};
use crate::params::ParamStore;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PVLR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Config snapshot (JSON text); the trainer stores the full run config
    /// plus the global step.
    pub config_json: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn find(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config_json.as_bytes();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(t.shape.len() as u8);
            for &dim in &t.shape {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in &t.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}") });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let cfg_len = r.u32()? as usize;
        let cfg_off = r.pos as u64;
        let cfg_bytes = r.take(cfg_len)?;
        let config_json = String::from_utf8(cfg_bytes.to_vec()).map_err(|_| Error::Format {
            offset: cfg_off,
            msg: "config is not UTF-8".into(),
        })?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_off = r.pos as u64;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
                offset: name_off,
                msg: "tensor name is not UTF-8".into(),
            })?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            tensors.push(NamedTensor { name, shape, values });
        }
        Ok(Checkpoint { config_json, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Packs live params, EMA shadows, and optimizer moments into a checkpoint.
pub fn pack_training_state(
    config_json: String,
    store: &ParamStore,
    ema: &EmaState,
    opt: &AdamWState,
) -> Checkpoint {
    let mut tensors = Vec::new();
    for (i, e) in store.entries().iter().enumerate() {
        tensors.push(NamedTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            values: e.values.clone(),
        });
        tensors.push(NamedTensor {
            name: format!("ema.{}", e.name),
            shape: e.shape.clone(),
            values: ema.shadow[i].clone(),
        });
        tensors.push(NamedTensor {
            name: format!("opt.m.{}", e.name),
            shape: e.shape.clone(),
            values: opt.m[i].clone(),
        });
        tensors.push(NamedTensor {
            name: format!("opt.v.{}", e.name),
            shape: e.shape.clone(),
            values: opt.v[i].clone(),
        });
    }
    // the shared step counter drives bias correction, so it is state too
    tensors.push(NamedTensor {
        name: "opt.step".to_string(),
        shape: vec![1],
        values: vec![opt.step as f64],
    });
    Checkpoint { config_json, tensors }
}

/// Restores live params, EMA, and optimizer moments in place from a
/// checkpoint produced by [`pack_training_state`].
pub fn unpack_training_state(
    ckpt: &Checkpoint,
    store: &mut ParamStore,
    ema: &mut EmaState,
    opt: &mut AdamWState,
) -> Result<()> {
    for i in 0..store.len() {
        let name = store.get(i).name.clone();
        let live = ckpt
            .find(&name)
            .ok_or_else(|| Error::Format { offset: 0, msg: format!("missing tensor {name}") })?;
        store.set_values(i, live.values.clone())?;
        for (prefix, slot) in [("ema", 0), ("opt.m", 1), ("opt.v", 2)] {
            let full = format!("{prefix}.{name}");
            let t = ckpt.find(&full).ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("missing tensor {full}"),
            })?;
            match slot {
                0 => ema.shadow[i] = t.values.clone(),
                1 => opt.m[i] = t.values.clone(),
                _ => opt.v[i] = t.values.clone(),
            }
        }
    }
    let step = ckpt
        .find("opt.step")
        .ok_or_else(|| Error::Format { offset: 0, msg: "missing tensor opt.step".into() })?;
    opt.step = *step.values.first().ok_or_else(|| Error::Format {
        offset: 0,
        msg: "opt.step tensor is empty".into(),
    })? as u64;
    Ok(())
}
