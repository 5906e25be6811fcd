//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FLOROCKP" | version u32 | header_len u64 | header (key = value text)
//! params table | moments m table | moments v table
//! table := count u64, then per array:
//!          name_len u32, name utf-8, ndim u32, dims u64 * ndim, data f64 * numel
//! ```
//!
//! Encoder-only exports have empty moment tables and `kind = encoder` in the
//! header.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use super::adamw::{AdamWConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::net::{encoder_only, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"FLOROCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    /// `None` for encoder-only exports.
    pub optimizer: Option<OptimizerState>,
    /// Completed epochs.
    pub epoch: usize,
    /// Root seed; with `epoch` it fixes every later random draw.
    pub seed: u64,
}

impl Checkpoint {
    pub fn is_encoder_only(&self) -> bool {
        self.optimizer.is_none()
    }

    /// Drops decoder parameters and optimizer state.
    pub fn encoder_export(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            params: encoder_only(&self.params),
            optimizer: None,
            epoch: self.epoch,
            seed: self.seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.model.to_kv();
        header.insert("kind", if self.is_encoder_only() { "encoder" } else { "full" });
        header.insert("epoch", self.epoch);
        header.insert("seed", self.seed);
        if let Some(opt) = &self.optimizer {
            let c = opt.config;
            header.insert("adamw.step", opt.step);
            // shortest round-trip formatting keeps the values bit-exact
            header.insert("adamw.lr", c.lr);
            header.insert("adamw.beta1", c.beta1);
            header.insert("adamw.beta2", c.beta2);
            header.insert("adamw.weight_decay", c.weight_decay);
            header.insert("adamw.eps", c.eps);
        }
        let header = header.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        write_table(&mut out, self.params.iter());
        let empty = BTreeMap::new();
        let (m, v) = match &self.optimizer {
            Some(o) => (&o.m, &o.v),
            None => (&empty, &empty),
        };
        write_table(&mut out, m.iter().map(|(k, t)| (k.as_str(), t)));
        write_table(&mut out, v.iter().map(|(k, t)| (k.as_str(), t)));
        out
    }

    /// Parses a whole checkpoint. Truncation surfaces as an I/O
    /// `UnexpectedEof`, a bad magic or version as a format error.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ReadError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ReadError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ReadError::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = read_u64(&mut r)? as usize;
        let header = read_vec(&mut r, hlen)?;
        let header = String::from_utf8(header).map_err(|_| ReadError::Format("header is not utf-8".into()))?;
        let kv = KvMap::parse(&header).map_err(|e| ReadError::Format(e.to_string()))?;
        let fmt = |e: Error| ReadError::Format(e.to_string());
        let model = ModelConfig::from_kv(&kv, &ModelConfig::toy()).map_err(fmt)?;
        let epoch = kv.parse_key("epoch").map_err(fmt)?;
        let seed = kv.parse_key("seed").map_err(fmt)?;
        let encoder_only = match kv.require("kind").map_err(fmt)? {
            "encoder" => true,
            "full" => false,
            k => return Err(ReadError::Format(format!("unknown checkpoint kind {k:?}"))),
        };
        let mut params = ParamStore::new();
        for (name, t) in read_table(&mut r)? {
            params.insert(name, t);
        }
        let m: BTreeMap<String, Tensor> = read_table(&mut r)?.into_iter().collect();
        let v: BTreeMap<String, Tensor> = read_table(&mut r)?.into_iter().collect();
        if !r.is_empty() {
            return Err(ReadError::Format(format!("{} trailing bytes", r.len())));
        }
        let optimizer = if encoder_only {
            None
        } else {
            Some(OptimizerState {
                config: AdamWConfig {
                    lr: kv.parse_key("adamw.lr").map_err(fmt)?,
                    beta1: kv.parse_key("adamw.beta1").map_err(fmt)?,
                    beta2: kv.parse_key("adamw.beta2").map_err(fmt)?,
                    weight_decay: kv.parse_key("adamw.weight_decay").map_err(fmt)?,
                    eps: kv.parse_key("adamw.eps").map_err(fmt)?,
                },
                step: kv.parse_key("adamw.step").map_err(fmt)?,
                m,
                v,
            })
        };
        Ok(Checkpoint {
            model,
            params,
            optimizer,
            epoch,
            seed,
        })
    }
}

/// Failure while decoding checkpoint bytes.
#[derive(Debug)]
pub enum ReadError {
    Io(io::Error),
    Format(String),
}

impl From<io::Error> for ReadError {
    fn from(e: io::Error) -> Self {
        ReadError::Io(e)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write then rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        ReadError::Io(source) => Error::io(path, source),
        ReadError::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
    })
}

fn write_table<'a>(out: &mut Vec<u8>, items: impl Iterator<Item = (&'a str, &'a Tensor)>) {
    let items: Vec<_> = items.collect();
    out.extend_from_slice(&(items.len() as u64).to_le_bytes());
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_u32(r: &mut &[u8]) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_vec(r: &mut &[u8], n: usize) -> io::Result<Vec<u8>> {
    if n > r.len() {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated checkpoint"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head.to_vec())
}

fn read_table(r: &mut &[u8]) -> std::result::Result<Vec<(String, Tensor)>, ReadError> {
    let count = read_u64(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let nlen = read_u32(r)? as usize;
        let name = String::from_utf8(read_vec(r, nlen)?).map_err(|_| ReadError::Format("array name is not utf-8".into()))?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| ReadError::Format(format!("array {name} has an absurd shape {shape:?}")))?;
        let raw = read_vec(r, numel)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| ReadError::Format(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}
