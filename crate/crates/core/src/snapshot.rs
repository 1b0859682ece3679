//! Binary tensor snapshots.
//!
//! A snapshot file is a concatenation of records, each
//! `u32 name_len | name (utf-8) | u64 rows | u64 cols | rows*cols f64`, all
//! little-endian, data row-major. Parameter checkpoints add a JSON manifest
//! listing every tensor's shape and a monotonically increasing version.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_matrix<S: Real>(name: impl Into<String>, m: &Matrix<S>) -> Self {
        Self {
            name: name.into(),
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn to_matrix<S: Real>(&self) -> Result<Matrix<S>> {
        Matrix::new(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| S::lit(x)).collect(),
        )
    }
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.rows as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(mut bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
        if buf.len() < n {
            return Err(Error::invalid("truncated tensor snapshot"));
        }
        let (head, tail) = buf.split_at(n);
        *buf = tail;
        Ok(head)
    }
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let name_len = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut bytes, name_len)?.to_vec())
            .map_err(|_| Error::invalid("tensor name is not utf-8"))?;
        let rows = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap()) as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::invalid("tensor shape overflows"))?;
        let raw = take(&mut bytes, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor {
            name,
            rows,
            cols,
            data,
        });
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_tensors(tensors))
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_tensors(&buf)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u64,
    pub tensors: Vec<TensorShape>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "params.bin";

/// Writes `manifest.json` + `params.bin` into `dir`. The version must exceed
/// any version already present there.
pub fn write_checkpoint(dir: &Path, version: u64, tensors: &[NamedTensor]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let prev = read_manifest(dir)?;
        if version <= prev.version {
            return Err(Error::invalid(format!(
                "checkpoint version {version} does not exceed existing version {}",
                prev.version
            )));
        }
    }
    let manifest = Manifest {
        version,
        tensors: tensors
            .iter()
            .map(|t| TensorShape {
                name: t.name.clone(),
                rows: t.rows,
                cols: t.cols,
            })
            .collect(),
    };
    write_tensors(&dir.join(TENSORS_FILE), tensors)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_checkpoint(dir: &Path) -> Result<(Manifest, Vec<NamedTensor>)> {
    let manifest = read_manifest(dir)?;
    let tensors = read_tensors(&dir.join(TENSORS_FILE))?;
    let shapes: Vec<TensorShape> = tensors
        .iter()
        .map(|t| TensorShape {
            name: t.name.clone(),
            rows: t.rows,
            cols: t.cols,
        })
        .collect();
    if shapes != manifest.tensors {
        return Err(Error::invalid("checkpoint tensors disagree with manifest"));
    }
    Ok((manifest, tensors))
}
