//! Flat binary tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SRCNCKPT"
//! version  u32      1
//! hlen     u64      byte length of the JSON header
//! header   hlen bytes of UTF-8 JSON:
//!          {"version":1,"meta":{..},"tensors":[{"name","shape","offset","len"}]}
//! data     f32 values; `offset`/`len` count elements from the start of this section
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::{ParamStore, Real, Tensor};

const MAGIC: &[u8; 8] = b"SRCNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named f32 tensors plus a free-form JSON metadata document.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: IndexMap::new(),
        }
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), t.cast());
    }

    /// Adds every parameter value of `store` under `prefix + name`.
    pub fn insert_params<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, p) in store.iter() {
            self.insert(format!("{prefix}{name}"), &p.value);
        }
    }

    /// Loads values for every parameter of `store` from `prefix + name`.
    pub fn load_params<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor `{key}`")))?;
            store.set_value(&name, t.cast())?;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
        }
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in self.tensors.values() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let hlen = u64::from_le_bytes(b8) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: Header = serde_json::from_slice(&hbuf)?;
        let total: usize = header.tensors.iter().map(|e| e.len).sum();
        let mut raw = vec![0u8; total * 4];
        r.read_exact(&mut raw)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut tensors = IndexMap::new();
        for e in header.tensors {
            if e.offset + e.len > values.len() || e.shape.iter().product::<usize>() != e.len {
                return Err(NnError::Checkpoint(format!("corrupt entry `{}`", e.name)));
            }
            let t = Tensor::from_vec(&e.shape, values[e.offset..e.offset + e.len].to_vec())?;
            tensors.insert(e.name, t);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
