//! Versioned binary container for named tensors.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` header length, a JSON header (metadata plus one entry per tensor),
//! then the raw little-endian tensor payloads in header order.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{NetworkConfig, Networks};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GADANCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<(TensorEntry, Tensor)>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, group: &str, name: &str, t: &Tensor) -> Result<()> {
        let entry = TensorEntry {
            group: group.to_string(),
            name: name.to_string(),
            shape: t.dims().to_vec(),
            dtype: dtype_name(t.dtype())?.to_string(),
        };
        self.tensors.push((entry, t.detach()));
        Ok(())
    }

    pub fn group<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a (TensorEntry, Tensor)> + 'a {
        self.tensors.iter().filter(move |(e, _)| e.group == group)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F32 => {
                    for v in flat.to_vec1::<f32>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let fail = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a GA-DAN container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(fail("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.format_version != version {
            return Err(fail("header version disagrees with preamble"));
        }
        let mut cursor = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let t = match e.dtype.as_str() {
                "f32" => {
                    let (chunk, rest) = take(cursor, n * 4)?;
                    cursor = rest;
                    let v: Vec<f32> = chunk
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), device)?
                }
                "f64" => {
                    let (chunk, rest) = take(cursor, n * 8)?;
                    cursor = rest;
                    let v: Vec<f64> = chunk
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), device)?
                }
                other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
            };
            tensors.push((e, t));
        }
        if !cursor.is_empty() {
            return Err(fail("trailing bytes after payload"));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device)
    }
}

fn take(buf: &[u8], n: usize) -> Result<(&[u8], &[u8])> {
    if buf.len() < n {
        return Err(Error::Checkpoint("truncated tensor payload".into()));
    }
    Ok(buf.split_at(n))
}

impl Networks {
    /// Append every parameter group to `c`.
    pub fn store(&self, c: &mut Container) -> Result<()> {
        for (group, vars) in self.named_groups() {
            for (name, var) in vars {
                c.push(group, &name, var.as_tensor())?;
            }
        }
        Ok(())
    }

    /// Overwrite parameters from `c`. Names and shapes must match exactly.
    pub fn restore(&self, c: &Container) -> Result<()> {
        for (group, vars) in self.named_groups() {
            let stored: Vec<_> = c.group(group).collect();
            if stored.len() != vars.len() {
                return Err(Error::Checkpoint(format!(
                    "group {group}: {} stored tensors, model has {}",
                    stored.len(),
                    vars.len()
                )));
            }
            for ((name, var), (entry, t)) in vars.iter().zip(stored) {
                if &entry.name != name || entry.shape != var.dims() {
                    return Err(Error::Checkpoint(format!(
                        "parameter mismatch: stored {}{:?}, model {name}{:?}",
                        entry.name,
                        entry.shape,
                        var.dims()
                    )));
                }
                var.set(&t.to_dtype(var.dtype())?)?;
            }
        }
        Ok(())
    }

    /// Standalone weights file with the architecture embedded.
    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({ "contents": "weights", "network": self.config });
        let mut c = Container::new(meta);
        self.store(&mut c)?;
        Ok(c)
    }

    /// Rebuild nets from a container holding an embedded `network` config.
    pub fn from_container(c: &Container, dtype: DType, device: &Device) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_value(
            c.meta
                .get("network")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing embedded network config".into()))?,
        )?;
        let nets = Networks::init(&cfg, 0, dtype, device)?;
        nets.restore(c)?;
        Ok(nets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        Self::from_container(&Container::read(path, device)?, dtype, device)
    }
}
