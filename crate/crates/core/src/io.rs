// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned binary container shared by model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic[4] | version u32 | header_len u32 | header (JSON) |
//! n_tensors u32 | { name_len u32 | name | ndim u32 | dims u64* | f32 data }*
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use belief_nn::{ParamStore, Tensor};
use serde::{de::DeserializeOwned, Serialize};

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(bytes)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_checkpoint<H: Serialize>(magic: &[u8; 4], header: &H, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let h = serde_json::to_vec(header)?;
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_checkpoint<H: Serialize>(
    path: &Path,
    magic: &[u8; 4],
    header: &H,
    tensors: &[(String, &Tensor<f32>)],
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(magic, header, tensors)?)
}

pub fn store_tensors(store: &ParamStore<f32>) -> Vec<(String, &Tensor<f32>)> {
    store.iter().map(|(n, p)| (n.to_string(), &p.value)).collect()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(H, Vec<(String, Tensor<f32>)>)> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0, path };
    let m = c.take(4).map_err(|_| format_err(path, "file too short for magic"))?;
    if m != magic {
        return Err(format_err(
            path,
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(m), String::from_utf8_lossy(magic)),
        ));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let hl = c.u32()? as usize;
    let header: H = serde_json::from_slice(c.take(hl)?).map_err(|e| format_err(path, e.to_string()))?;
    let n = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let nl = c.u32()? as usize;
        let name = String::from_utf8(c.take(nl)?.to_vec()).map_err(|e| format_err(path, e.to_string()))?;
        let nd = c.u32()? as usize;
        let mut shape = Vec::with_capacity(nd);
        for _ in 0..nd {
            shape.push(c.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = c
            .take(len * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)));
    }
    if c.pos != buf.len() {
        return Err(format_err(path, "trailing bytes after last tensor"));
    }
    Ok((header, tensors))
}

/// Copies named tensors into a store whose parameter names and shapes match.
pub fn load_into_store(path: &Path, store: &mut ParamStore<f32>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(format_err(path, format!("expected {} tensors, found {}", store.len(), tensors.len())));
    }
    for (name, t) in tensors {
        let id = store.id(&name).ok_or_else(|| format_err(path, format!("unknown tensor {name}")))?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(format_err(path, format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), p.value.shape())));
        }
        p.value = t;
    }
    Ok(())
}
