//! Directory container: a JSON manifest plus one flat binary file per tensor.
//!
//! Each tensor file is `ndim` (u64 LE), the extents (u64 LE each), then the
//! values in row-major order as little-endian `f32` or `f64`. The manifest
//! lists every tensor with its dtype, shape and SHA-256, which is verified on
//! read.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, DataError, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "cstvae-container-v1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// What the container holds, e.g. `dataset` or `checkpoint`.
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn header(shape: &[usize], dtype: DType) -> Vec<u8> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(8 * (shape.len() + 1) + n * dtype.width());
    out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

pub fn encode_f64(shape: &[usize], data: &[f64]) -> Vec<u8> {
    let mut out = header(shape, DType::F64);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_f32(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let mut out = header(shape, DType::F32);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Splits a tensor file into its shape and payload bytes.
pub fn decode_header<'a>(path: &Path, bytes: &'a [u8], dtype: DType) -> Result<(Vec<usize>, &'a [u8])> {
    let word = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| format_err(path, at, "truncated header"))
    };
    let ndim = word(0)?;
    if ndim > 8 {
        return Err(format_err(path, 0, format!("implausible rank {ndim}")));
    }
    let shape = (0..ndim).map(|i| word(8 + 8 * i)).collect::<Result<Vec<_>>>()?;
    let start = 8 * (ndim + 1);
    let n: usize = shape.iter().product();
    let want = n * dtype.width();
    let body = &bytes[start..];
    if body.len() != want {
        return Err(format_err(
            path,
            start,
            format!("{} payload bytes, expected {want} for shape {shape:?}", body.len()),
        ));
    }
    Ok((shape, body))
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(DataError::Invalid(format!("invalid tensor name '{name}'")))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub struct ContainerWriter {
    dir: PathBuf,
    records: Vec<TensorRecord>,
}

impl ContainerWriter {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self {
            dir,
            records: Vec::new(),
        })
    }

    fn add(&mut self, name: &str, shape: &[usize], dtype: DType, bytes: Vec<u8>) -> Result<()> {
        check_name(name)?;
        if self.records.iter().any(|r| r.name == name) {
            return Err(DataError::Invalid(format!("duplicate tensor '{name}'")));
        }
        let file = format!("{name}.bin");
        write_atomic(&self.dir.join(&file), &bytes)?;
        self.records.push(TensorRecord {
            name: name.to_string(),
            file,
            dtype,
            shape: shape.to_vec(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn add_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        self.add(name, shape, DType::F64, encode_f64(shape, data))
    }

    pub fn add_f32(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        self.add(name, shape, DType::F32, encode_f32(shape, data))
    }

    pub fn add_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.add_f64(name, t.shape(), t.data())
    }

    /// Writes the manifest last, so a container without one is incomplete.
    pub fn finish(self, kind: &str, meta: serde_json::Value) -> Result<Manifest> {
        let manifest = Manifest {
            format: FORMAT.into(),
            kind: kind.into(),
            meta,
            tensors: self.records,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(&self.dir.join(MANIFEST), text.as_bytes())?;
        Ok(manifest)
    }
}

#[derive(Clone, Debug)]
pub struct Container {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Container {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
        if manifest.format != FORMAT {
            return Err(DataError::Invalid(format!(
                "{}: unsupported container format '{}'",
                path.display(),
                manifest.format
            )));
        }
        Ok(Self { dir, manifest })
    }

    pub fn record(&self, name: &str) -> Result<&TensorRecord> {
        self.manifest
            .tensors
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| DataError::Invalid(format!("{}: no tensor '{name}'", self.dir.display())))
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.tensors.iter().any(|r| r.name == name)
    }

    fn raw(&self, name: &str) -> Result<(TensorRecord, PathBuf, Vec<u8>)> {
        let rec = self.record(name)?.clone();
        let path = self.dir.join(&rec.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let actual = sha256_hex(&bytes);
        if actual != rec.sha256 {
            return Err(DataError::Checksum {
                path,
                expected: rec.sha256,
                actual,
            });
        }
        Ok((rec, path, bytes))
    }

    pub fn read_f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (rec, path, bytes) = self.raw(name)?;
        let (shape, body) = decode_header(&path, &bytes, rec.dtype)?;
        let data = match rec.dtype {
            DType::F64 => body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        Ok((shape, data))
    }

    pub fn read_f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let (rec, path, bytes) = self.raw(name)?;
        let (shape, body) = decode_header(&path, &bytes, rec.dtype)?;
        let data = match rec.dtype {
            DType::F32 => body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F64 => body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect(),
        };
        Ok((shape, data))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, data) = self.read_f64(name)?;
        if shape.is_empty() {
            return Ok(Tensor::scalar(data[0]));
        }
        Tensor::new(shape, data).map_err(|e| DataError::Invalid(e.to_string()))
    }
}
