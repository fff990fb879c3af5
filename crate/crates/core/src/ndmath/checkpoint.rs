//! LCBC tensor container.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "LCBC" | version | count | entry*
//! entry (v1) = name_len | name (UTF-8) | rank | extent* | f32 LE payload
//! entry (v2) = name_len | name (UTF-8) | dtype (u8: 0 = f32, 1 = u8) | rank | extent* | payload
//! ```
//!
//! Model weights are always written as version 1. Version 2 exists only so
//! datasets can store frames as raw bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LCBC";
pub const VERSION: u32 = 1;
pub const VERSION_TYPED: u32 = 2;

/// A named entry of a version-2 container.
#[derive(Clone, Debug, PartialEq)]
pub enum Blob {
    F32(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Blob {
    pub fn shape(&self) -> &[usize] {
        match self {
            Blob::F32(t) => t.shape(),
            Blob::U8 { shape, .. } => shape,
        }
    }
}

fn err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_name(w: &mut impl Write, name: &str) -> std::io::Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())
}

fn put_shape(w: &mut impl Write, shape: &[usize]) -> std::io::Result<()> {
    put_u32(w, shape.len() as u32)?;
    for &d in shape {
        put_u32(w, d as u32)?;
    }
    Ok(())
}

fn put_f32s(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Writes named f32 tensors as a version-1 container.
pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, entries.len() as u32)?;
    for (name, t) in entries {
        put_name(&mut w, name)?;
        put_shape(&mut w, t.shape())?;
        put_f32s(&mut w, t.data())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a version-2 container with per-entry dtypes.
pub fn save_blobs(path: &Path, entries: &[(String, Blob)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION_TYPED)?;
    put_u32(&mut w, entries.len() as u32)?;
    for (name, b) in entries {
        put_name(&mut w, name)?;
        match b {
            Blob::F32(t) => {
                w.write_all(&[0])?;
                put_shape(&mut w, t.shape())?;
                put_f32s(&mut w, t.data())?;
            }
            Blob::U8 { shape, data } => {
                w.write_all(&[1])?;
                put_shape(&mut w, shape)?;
                w.write_all(data)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
    entry: String,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| {
            if self.entry.is_empty() {
                err(self.path, format!("truncated while reading {}", what))
            } else {
                err(
                    self.path,
                    format!("truncated: tensor '{}' is incomplete ({})", self.entry, what),
                )
            }
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32("rank")? as usize;
        if rank > 8 {
            return Err(err(self.path, format!("tensor '{}' has rank {}", self.entry, rank)));
        }
        (0..rank).map(|_| self.u32("extent").map(|d| d as usize)).collect()
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n * 4, "payload")?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

type Partial = (u32, Vec<(String, Blob)>, Option<Error>);

/// Reads entries until the end or the first malformed/truncated one.
fn read_partial(path: &Path) -> Result<Partial> {
    let file = File::open(path).map_err(|e| err(path, e.to_string()))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
        entry: String::new(),
    };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(err(path, format!("bad magic {:?}, expected \"LCBC\"", magic)));
    }
    let version = r.u32("version")?;
    if version != VERSION && version != VERSION_TYPED {
        return Err(err(
            path,
            format!("unsupported format version {} (expected {} or {})", version, VERSION, VERSION_TYPED),
        ));
    }
    let count = r.u32("count")?;
    let mut out = Vec::with_capacity(count as usize);
    for idx in 0..count {
        match read_entry(&mut r, version, idx, count) {
            Ok(e) => out.push(e),
            Err(e) => return Ok((version, out, Some(e))),
        }
    }
    Ok((version, out, None))
}

fn read_entry<R: Read>(r: &mut Reader<'_, R>, version: u32, idx: u32, count: u32) -> Result<(String, Blob)> {
    let path = r.path;
    r.entry.clear();
    let nlen = r.u32(&format!("name length of entry {}", idx))
        .map_err(|_| err(path, format!("truncated: expected {} tensors, found {}", count, idx)))?
        as usize;
    let name = String::from_utf8(r.bytes(nlen, "name")?)
        .map_err(|_| err(path, "tensor name is not UTF-8"))?;
    r.entry = name.clone();
    let dtype = if version == VERSION_TYPED {
        r.bytes(1, "dtype")?[0]
    } else {
        0
    };
    let shape = r.shape()?;
    let n: usize = shape.iter().product();
    let blob = match dtype {
        0 => Blob::F32(Tensor::new(shape, r.f32s(n)?)?),
        1 => Blob::U8 {
            data: r.bytes(n, "payload")?,
            shape,
        },
        d => return Err(err(path, format!("tensor '{}' has unknown dtype {}", name, d))),
    };
    Ok((name, blob))
}

fn read_all(path: &Path) -> Result<(u32, Vec<(String, Blob)>)> {
    let (version, entries, failure) = read_partial(path)?;
    match failure {
        Some(e) => Err(e),
        None => Ok((version, entries)),
    }
}

/// Like [`load`], but returns the tensors read before a truncation together
/// with the truncation error, so callers can name what is missing.
pub fn load_partial(path: &Path) -> Result<(Vec<(String, Tensor)>, Option<Error>)> {
    let (_, entries, failure) = read_partial(path)?;
    let tensors = entries
        .into_iter()
        .filter_map(|(n, b)| match b {
            Blob::F32(t) => Some((n, t)),
            Blob::U8 { .. } => None,
        })
        .collect();
    Ok((tensors, failure))
}

/// Reads a container of f32 tensors (either version).
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let (_, entries) = read_all(path)?;
    entries
        .into_iter()
        .map(|(name, b)| match b {
            Blob::F32(t) => Ok((name, t)),
            Blob::U8 { .. } => Err(err(path, format!("tensor '{}' is u8, expected f32", name))),
        })
        .collect()
}

pub fn load_blobs(path: &Path) -> Result<Vec<(String, Blob)>> {
    Ok(read_all(path)?.1)
}

/// Looks up `name` and checks its shape.
pub fn take(
    entries: &[(String, Tensor)],
    name: &str,
    shape: &[usize],
    path: &Path,
) -> Result<Tensor> {
    let t = entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| err(path, format!("missing tensor '{}'", name)))?;
    if t.shape() != shape {
        return Err(err(
            path,
            format!("tensor '{}' has shape {:?}, expected {:?}", name, t.shape(), shape),
        ));
    }
    Ok(t.clone())
}
