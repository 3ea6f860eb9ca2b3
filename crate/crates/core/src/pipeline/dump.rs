// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation dumps: a little-endian binary array plus an optional CSV
//! sidecar with per-row sequence id, position, token and beliefs.
//!
//! ```text
//! "BGAD" | version u32 | dtype u8 (0 = f32, 1 = f64) | ndim u32 | dims u64* | payload
//! ```

use std::path::{Path, PathBuf};

use belief_nn::Tensor;

use crate::io::write_atomic;
use crate::transformer::ResidualCapture;
use crate::{Error, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"BGAD";
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DumpMeta {
    /// `(sequence id, position)` per row.
    pub positions: Vec<(usize, usize)>,
    pub tokens: Vec<usize>,
    /// `beliefs[row][component]`, when ground truth is known.
    pub beliefs: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub shape: Vec<usize>,
    /// Row-major payload.
    pub data: Vec<f32>,
    pub meta: Option<DumpMeta>,
}

/// Sidecar path for a dump: `<path>.meta.csv`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.csv");
    PathBuf::from(s)
}

impl ActivationDump {
    pub fn from_capture(cap: &ResidualCapture) -> Self {
        let n = cap.positions.len();
        let d = cap.vectors.dims2().1;
        let data = if n == 0 { vec![] } else { cap.vectors.data().to_vec() };
        let beliefs = cap.beliefs.iter().map(|row| row.iter().map(|b| b.weights().to_vec()).collect()).collect();
        Self {
            shape: vec![n, d],
            data,
            meta: Some(DumpMeta { positions: cap.positions.clone(), tokens: cap.tokens.clone(), beliefs: Some(beliefs) }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// The payload as an `[n, d]` tensor; empty dumps are an error here.
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        if self.shape.len() != 2 {
            return Err(Error::invalid(format!("expected a 2-D dump, got shape {:?}", self.shape)));
        }
        if self.shape.contains(&0) {
            return Err(Error::InsufficientData(format!("dump has shape {:?}", self.shape)));
        }
        Ok(Tensor::new(&self.shape, self.data.clone()))
    }

    /// Ground-truth beliefs, or an error naming the dump that lacks them.
    pub fn beliefs(&self) -> Result<&[Vec<Vec<f64>>]> {
        self.meta
            .as_ref()
            .and_then(|m| m.beliefs.as_deref())
            .ok_or_else(|| Error::InsufficientData("dump has no belief metadata; ground-truth stages need a dump written by `capture`".into()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.shape.len() * 8 + self.data.len() * 4);
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.push(0);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Writes the payload and, when present, the sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(meta) = &self.meta {
            write_atomic(&sidecar_path(path), &encode_meta(meta)?)?;
        }
        write_atomic(path, &self.encode())
    }
}

fn encode_meta(meta: &DumpMeta) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let dims: Vec<usize> = meta.beliefs.as_ref().and_then(|b| b.first()).map(|r| r.iter().map(Vec::len).collect()).unwrap_or_default();
    let mut header = vec!["sequence_id".to_string(), "position".into(), "token".into()];
    for (c, &s) in dims.iter().enumerate() {
        header.extend((0..s).map(|j| format!("b{c}_{j}")));
    }
    w.write_record(&header)?;
    for (i, &(sid, pos)) in meta.positions.iter().enumerate() {
        let mut rec = vec![sid.to_string(), pos.to_string(), meta.tokens[i].to_string()];
        if let Some(b) = &meta.beliefs {
            rec.extend(b[i].iter().flatten().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn decode_meta(path: &Path, rows: usize) -> Result<DumpMeta> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "sequence_id" || &header[1] != "position" || &header[2] != "token" {
        return Err(format_err(path, "sidecar header must start with sequence_id,position,token"));
    }
    // component sizes from `b{c}_{j}` column names
    let mut dims: Vec<usize> = Vec::new();
    for name in header.iter().skip(3) {
        let (c, _) = name
            .strip_prefix('b')
            .and_then(|s| s.split_once('_'))
            .and_then(|(c, j)| Some((c.parse::<usize>().ok()?, j.parse::<usize>().ok()?)))
            .ok_or_else(|| format_err(path, format!("bad belief column {name}")))?;
        if c == dims.len() {
            dims.push(1);
        } else if c + 1 == dims.len() {
            dims[c] += 1;
        } else {
            return Err(format_err(path, format!("belief column {name} out of order")));
        }
    }
    let mut positions = Vec::new();
    let mut tokens = Vec::new();
    let mut beliefs = Vec::new();
    for (ln, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<usize> { rec[i].parse().map_err(|_| format_err(path, format!("row {}: bad integer", ln + 1))) };
        positions.push((num(0)?, num(1)?));
        tokens.push(num(2)?);
        let mut vals = rec.iter().skip(3).map(|v| v.parse::<f64>().map_err(|_| format_err(path, format!("row {}: bad belief", ln + 1))));
        let mut row = Vec::with_capacity(dims.len());
        for &s in &dims {
            row.push((0..s).map(|_| vals.next().expect("csv enforces equal record lengths")).collect::<Result<Vec<f64>>>()?);
        }
        beliefs.push(row);
    }
    if positions.len() != rows {
        return Err(format_err(path, format!("sidecar has {} rows, payload has {rows}", positions.len())));
    }
    Ok(DumpMeta { positions, tokens, beliefs: (!dims.is_empty()).then_some(beliefs) })
}

/// Reads and validates a dump and its sidecar, if one exists.
pub fn import_dump(path: &Path) -> Result<ActivationDump> {
    let buf = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    if buf.len() < 13 || &buf[..4] != DUMP_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != DUMP_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let width = match buf[8] {
        0 => 4,
        1 => 8,
        c => return Err(format_err(path, format!("unknown dtype code {c}"))),
    };
    let ndim = u32::from_le_bytes(buf[9..13].try_into().expect("4 bytes")) as usize;
    let head = 13 + 8 * ndim;
    if ndim == 0 || buf.len() < head {
        return Err(format_err(path, "truncated header"));
    }
    let shape: Vec<usize> = (0..ndim).map(|i| u64::from_le_bytes(buf[13 + 8 * i..21 + 8 * i].try_into().expect("8 bytes")) as usize).collect();
    let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| format_err(path, "shape overflows"))?;
    let expected = head as u64 + count as u64 * width as u64;
    if buf.len() as u64 != expected {
        return Err(Error::Corrupt { path: path.to_path_buf(), expected, actual: buf.len() as u64 });
    }
    let payload = &buf[head..];
    let data: Vec<f32> = if width == 4 {
        payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()
    } else {
        payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")) as f32).collect()
    };
    let side = sidecar_path(path);
    let meta = if side.exists() { Some(decode_meta(&side, shape[0])?) } else { None };
    Ok(ActivationDump { shape, data, meta })
}
