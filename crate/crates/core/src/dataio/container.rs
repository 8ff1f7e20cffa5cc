//! The `MWAL` matrix container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | field                                               |
//! |------------|-----------------------------------------------------|
//! | 4          | magic `MWAL`                                        |
//! | 4          | format version (`u32`)                              |
//! | 8          | rows `N` (`u64`)                                    |
//! | 8          | cols `d` (`u64`)                                    |
//! | 1          | dtype code: `0x01` = `f32`, `0x02` = `f64`          |
//! | N·d·size   | values, row-major                                   |
//! | 8 + k      | `u64` length, then UTF-8 newline-separated row ids  |
//! | 8 + j      | optional: `u64` length, then a UTF-8 JSON object    |
//!
//! Embedding files use `f32`. Model artifacts (orthogonal maps, weights)
//! use `f64` so that orthogonality survives a save/load cycle.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"MWAL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0x01,
    F64 = 0x02,
}

impl Dtype {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0x01 => Some(Dtype::F32),
            0x02 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// One matrix plus its row ids and an optional JSON metadata object.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub data: Matrix,
    pub row_ids: Vec<String>,
    pub meta: Option<Value>,
}

pub fn encode(record: &Record, dtype: Dtype) -> Result<Vec<u8>> {
    let (rows, cols) = record.data.shape();
    if !record.row_ids.is_empty() && record.row_ids.len() != rows {
        return Err(Error::shape(format!(
            "{} row ids for {} rows",
            record.row_ids.len(),
            rows
        )));
    }
    if let Some(bad) = record
        .row_ids
        .iter()
        .find(|id| id.is_empty() || id.contains('\n'))
    {
        return Err(Error::invalid(format!("row id {bad:?} is empty or contains a newline")));
    }
    let mut out = Vec::with_capacity(25 + rows * cols * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out.push(dtype as u8);
    for i in 0..rows {
        for j in 0..cols {
            let v = record.data[(i, j)];
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let ids = record.row_ids.join("\n");
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    out.extend_from_slice(ids.as_bytes());
    if let Some(meta) = &record.meta {
        let text = serde_json::to_string(meta)?;
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn block(&mut self, what: &str) -> Result<&'a str> {
        let len = self.u64(what)?;
        let len = usize::try_from(len).map_err(|_| self.fail(format!("{what} too long")))?;
        let start = self.pos;
        let bytes = self.take(len, what)?;
        std::str::from_utf8(bytes).map_err(|e| Error::Format {
            offset: (start + e.valid_up_to()) as u64,
            reason: format!("{what} is not valid UTF-8"),
        })
    }
}

pub fn decode(buf: &[u8]) -> Result<Record> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let rows = cur.u64("row count")?;
    let cols = cur.u64("column count")?;
    let code = cur.take(1, "dtype")?[0];
    let dtype = Dtype::from_code(code).ok_or(Error::Format {
        offset: 24,
        reason: format!("unknown dtype code {code:#04x}"),
    })?;
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size() as u64))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| cur.fail("declared payload size overflows"))?;
    if payload > cur.remaining() {
        return Err(cur.fail(format!(
            "header declares {rows}x{cols} values ({payload} bytes) but only {} bytes follow",
            cur.remaining()
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let bytes = cur.take(payload, "payload")?;
    let values: Vec<f64> = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let data = Matrix::from_row_slice(rows, cols, &values);
    let ids = cur.block("row id block")?;
    let row_ids: Vec<String> = if ids.is_empty() {
        Vec::new()
    } else {
        ids.split('\n').map(str::to_owned).collect()
    };
    if !row_ids.is_empty() && row_ids.len() != rows {
        return Err(cur.fail(format!("{} row ids for {rows} rows", row_ids.len())));
    }
    let meta = if cur.remaining() == 0 {
        None
    } else {
        let start = cur.pos;
        let text = cur.block("metadata block")?;
        Some(serde_json::from_str(text).map_err(|e| Error::Format {
            offset: start as u64,
            reason: format!("metadata is not JSON: {e}"),
        })?)
    };
    if cur.remaining() != 0 {
        return Err(cur.fail("trailing bytes after metadata"));
    }
    Ok(Record {
        data,
        row_ids,
        meta,
    })
}

pub fn write_record(path: &Path, record: &Record, dtype: Dtype) -> Result<()> {
    let bytes = encode(record, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_record(path: &Path) -> Result<Record> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Write a bare `f64` matrix (no ids, no metadata).
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let record = Record {
        data: m.clone(),
        row_ids: Vec::new(),
        meta: None,
    };
    write_record(path, &record, Dtype::F64)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    Ok(read_record(path)?.data)
}
