//! Flat binary container of named `f64` tensors.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! describing each tensor (name, shape, space, element offset) plus free-form
//! metadata, then every tensor's data as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::layers::Space;

const MAGIC: &[u8; 8] = b"HPTENS01";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub space: Space,
    pub tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    space: Space,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<NamedTensor>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, space: Space, tensor: Tensor) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            space,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn take(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .map(|t| t.tensor.clone())
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = Entry {
                    name: t.name.clone(),
                    shape: t.tensor.shape().to_vec(),
                    space: t.space,
                    offset,
                };
                offset += t.tensor.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            tensors,
            meta: self.meta.clone(),
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in &self.tensors {
            for v in t.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| Error::Format("header too large".into()))?;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;

        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() % 8 != 0 {
            return Err(Error::Format("payload is not a whole number of f64".into()));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Format(format!("tensor `{}` runs past the payload", e.name)))?
                .to_vec();
            tensors.push(NamedTensor {
                name: e.name,
                space: e.space,
                tensor: Tensor::new(e.shape, data)?,
            });
        }
        Ok(Self {
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
