//! SPWT weight files.
//!
//! Layout: the 4 magic bytes `SPWT`, a little-endian `u64` header length `L`,
//! `L` bytes of UTF-8 JSON mapping each tensor name to
//! `{"dtype":"f32","shape":[..],"offset":o,"nbytes":n}`, then the raw
//! little-endian `f32` blob. Offsets are relative to the end of the header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPWT";

const HEADER: &str = "<header>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// Named tensors, kept in name order so files are byte-reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<String, Tensor>,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Configuration(format!("missing weight tensor `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let nbytes = (t.data.len() * 4) as u64;
            header.insert(
                name.clone(),
                TensorInfo {
                    dtype: "f32".into(),
                    shape: t.shape.clone(),
                    offset,
                    nbytes,
                },
            );
            offset += nbytes;
        }
        let header = serde_json::to_vec(&header).expect("header map always serializes");
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |tensor: &str, message: String| Error::WeightFormat {
            tensor: tensor.to_string(),
            message,
        };
        if bytes.len() < 12 {
            return Err(fail(HEADER, format!("file is only {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(HEADER, format!("bad magic {:?}", &bytes[..4])));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let blob_start = 12u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| {
                fail(
                    HEADER,
                    format!("header length {header_len} exceeds file size {}", bytes.len()),
                )
            })? as usize;
        let header: BTreeMap<String, TensorInfo> = serde_json::from_slice(&bytes[12..blob_start])
            .map_err(|e| fail(HEADER, format!("invalid header json: {e}")))?;
        let blob = &bytes[blob_start..];

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.len());
        let mut tensors = BTreeMap::new();
        for (name, info) in &header {
            if info.dtype != "f32" {
                return Err(fail(name, format!("unsupported dtype `{}`", info.dtype)));
            }
            let elems = info
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| fail(name, "shape overflows".into()))?;
            if elems.checked_mul(4) != Some(info.nbytes) {
                return Err(fail(
                    name,
                    format!(
                        "nbytes {} inconsistent with shape {:?} ({} bytes)",
                        info.nbytes,
                        info.shape,
                        elems * 4
                    ),
                ));
            }
            let end = info
                .offset
                .checked_add(info.nbytes)
                .filter(|&end| end <= blob.len() as u64)
                .ok_or_else(|| {
                    fail(
                        name,
                        format!(
                            "data [{}, +{}) runs past end of blob ({} bytes): truncated",
                            info.offset,
                            info.nbytes,
                            blob.len()
                        ),
                    )
                })?;
            spans.push((info.offset, end, name));
            let raw = &blob[info.offset as usize..end as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(
                name.clone(),
                Tensor {
                    shape: info.shape.clone(),
                    data,
                },
            );
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(fail(
                    pair[1].2,
                    format!("data overlaps tensor `{}`", pair[0].2),
                ));
            }
        }
        Ok(Weights { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl FromIterator<(String, Tensor)> for Weights {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Weights {
            tensors: iter.into_iter().collect(),
        }
    }
}
