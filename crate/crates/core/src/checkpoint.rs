//! Binary container for named arrays plus a JSON metadata record.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "UWCK"
//! version      u32      1
//! meta_len     u32      length of the metadata JSON in bytes
//! meta         meta_len UTF-8 JSON object
//! entry_count  u32
//! entry_count times:
//!   name_len   u16
//!   name       name_len UTF-8 bytes
//!   dtype      u8       0 = f32, 1 = f64
//!   ndim       u8
//!   dims       ndim x u32
//!   data       prod(dims) values of dtype, row-major
//! checksum     32 bytes SHA-256 of every preceding byte
//! ```
//!
//! Entries are written in name order, so equal content gives equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::model::{Model, ModelConfig};
use crate::weights::{WeightMeta, WeightStore};

pub const MAGIC: &[u8; 4] = b"UWCK";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dtype: DType,
    pub data: ArrayD<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new(metadata: Value) -> Self {
        Container {
            metadata,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, dtype: DType, data: ArrayD<f64>) {
        self.entries.insert(name.into(), Entry { dtype, data });
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.entries
            .get(name)
            .map(|e| &e.data)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").and_then(Value::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&len_u32(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.entries.len(), "entry count")?.to_le_bytes());
        for (name, e) in &self.entries {
            let nb = name.as_bytes();
            let nl = u16::try_from(nb.len())
                .map_err(|_| Error::InvalidArgument(format!("entry name too long: {name}")))?;
            out.extend_from_slice(&nl.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(e.dtype as u8);
            let ndim = u8::try_from(e.data.ndim())
                .map_err(|_| Error::InvalidArgument(format!("{name}: too many dimensions")))?;
            out.push(ndim);
            for &d in e.data.shape() {
                out.extend_from_slice(&len_u32(d, name)?.to_le_bytes());
            }
            let std = e.data.as_standard_layout();
            match e.dtype {
                DType::F32 => std
                    .iter()
                    .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
                DType::F64 => std
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
            return Err(corrupt("file too short"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata: Value = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let nl = r.u16()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec())
                .map_err(|_| corrupt("entry name is not UTF-8"))?;
            let dtype = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                t => return Err(corrupt(&format!("{name}: unknown dtype {t}"))),
            };
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let width = if dtype == DType::F32 { 4 } else { 8 };
            let raw = r.take(
                numel
                    .checked_mul(width)
                    .ok_or_else(|| corrupt("entry too large"))?,
            )?;
            let values: Vec<f64> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let data = ArrayD::from_shape_vec(IxDyn(&dims), values)
                .map_err(|e| corrupt(&e.to_string()))?;
            entries.insert(name, Entry { dtype, data });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes before checksum"));
        }
        Ok(Container { metadata, entries })
    }

    /// Writes through a temporary file and a rename, so an existing file is
    /// replaced only by a complete one.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes).map_err(|e| match e {
            Error::CorruptCheckpoint(msg) => {
                Error::CorruptCheckpoint(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }

    /// Copies every entry into a weight store.
    pub fn to_weights(&self) -> WeightStore {
        let mut ws = WeightStore::new();
        for (k, e) in &self.entries {
            ws.insert(k.clone(), e.data.clone());
        }
        ws
    }

    /// Adds every entry of `ws` under `prefix` with the given dtype.
    pub fn insert_weights(&mut self, prefix: &str, ws: &WeightStore, dtype: DType) {
        for (k, v) in ws.iter() {
            self.insert(format!("{prefix}{k}"), dtype, v.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn weights_with_prefix(&self, prefix: &str) -> WeightStore {
        let mut ws = WeightStore::new();
        for (k, e) in &self.entries {
            if let Some(rest) = k.strip_prefix(prefix) {
                ws.insert(rest.to_string(), e.data.clone());
            }
        }
        ws
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what}: length {n} exceeds u32")))
}

fn corrupt(msg: &str) -> Error {
    Error::CorruptCheckpoint(msg.to_string())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub const KIND_MODEL: &str = "model";
pub const KIND_EXTRACTOR: &str = "extractor";

/// Model weights as f32 together with the configuration that produced them.
pub fn model_container(cfg: &ModelConfig, ws: &WeightStore) -> Container {
    let mut c = Container::new(json!({
        "kind": KIND_MODEL,
        "config": cfg,
        "config_hash": cfg.hash(),
        "seed": ws.meta.seed,
    }));
    c.insert_weights("", ws, DType::F32);
    c
}

pub fn save_model(path: &Path, cfg: &ModelConfig, ws: &WeightStore) -> Result<()> {
    model_container(cfg, ws).write(path)
}

/// Reads a model checkpoint and checks that the stored hash matches the
/// stored configuration and that the weight table matches the architecture.
pub fn model_from_container(c: &Container) -> Result<(ModelConfig, WeightStore)> {
    if c.kind() != Some(KIND_MODEL) {
        return Err(corrupt(&format!(
            "expected a model checkpoint, found {:?}",
            c.kind()
        )));
    }
    let cfg: ModelConfig =
        serde_json::from_value(c.metadata.get("config").cloned().unwrap_or(Value::Null))?;
    let hash = c
        .metadata
        .get("config_hash")
        .and_then(Value::as_str)
        .unwrap_or("");
    if hash != cfg.hash() {
        return Err(corrupt(
            "config hash does not match the stored configuration",
        ));
    }
    let seed = c
        .metadata
        .get("seed")
        .and_then(Value::as_u64)
        .unwrap_or(cfg.seed);
    let mut ws = c.weights_with_prefix("");
    ws.meta = WeightMeta {
        config_hash: cfg.hash(),
        seed,
    };
    Model::new(&cfg)?.check_weights(&ws)?;
    Ok((cfg, ws))
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, WeightStore)> {
    model_from_container(&Container::read(path)?)
}

pub fn save_extractor(path: &Path, f: &FeatureExtractor) -> Result<()> {
    let mut c = Container::new(json!({ "kind": KIND_EXTRACTOR, "seed": f.weights.meta.seed }));
    c.insert_weights("", &f.weights, DType::F32);
    c.write(path)
}

pub fn load_extractor(path: &Path) -> Result<FeatureExtractor> {
    let c = Container::read(path)?;
    if c.kind() != Some(KIND_EXTRACTOR) {
        return Err(corrupt(&format!(
            "expected an extractor file, found {:?}",
            c.kind()
        )));
    }
    FeatureExtractor::from_weights(c.weights_with_prefix(""))
}
