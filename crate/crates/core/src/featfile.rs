//! `NARSFEAT` dense matrix files.
//!
//! Layout (little-endian): 8-byte magic `NARSFEAT`, `u64` rows, `u64` cols,
//! then `rows * cols` `f32` values in row-major order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{NarsError, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 8] = b"NARSFEAT";
const HEADER_LEN: usize = 24;

pub fn encode(m: &Matrix<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Matrix<f32>> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(NarsError::Format("missing NARSFEAT header".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| NarsError::Format(format!("header {rows}x{cols} overflows")))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(NarsError::Format(format!(
            "{rows}x{cols} matrix needs {expected} payload bytes, file has {} (truncated?)",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Writes `m` and returns the hex SHA-256 of the bytes written.
pub fn write(path: &Path, m: &Matrix<f32>) -> Result<String> {
    let bytes = encode(m);
    let file = fs::File::create(path).map_err(|e| NarsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| NarsError::io(path, e))?;
    w.flush().map_err(|e| NarsError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read(path: &Path) -> Result<Matrix<f32>> {
    let bytes = fs::read(path).map_err(|e| NarsError::io(path, e))?;
    decode(&bytes).map_err(|e| NarsError::Format(format!("{}: {e}", path.display())))
}

/// Reads the file and verifies its SHA-256 before decoding.
pub fn read_checked(path: &Path, sha256: &str) -> Result<Matrix<f32>> {
    let bytes = fs::read(path).map_err(|e| NarsError::io(path, e))?;
    if sha256_hex(&bytes) != sha256 {
        return Err(NarsError::Checksum(path.to_path_buf()));
    }
    decode(&bytes).map_err(|e| NarsError::Format(format!("{}: {e}", path.display())))
}

/// Whitespace-separated text rows, one matrix row per non-comment line.
pub fn read_tsv(path: &Path) -> Result<Matrix<f32>> {
    let text = fs::read_to_string(path).map_err(|e| NarsError::io(path, e))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut n = 0;
        for tok in line.split_whitespace() {
            let v: f32 = tok
                .parse()
                .map_err(|_| NarsError::parse(path, i + 1, format!("bad float `{tok}`")))?;
            data.push(v);
            n += 1;
        }
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(NarsError::parse(path, i + 1, format!("expected {c} columns, got {n}")))
            }
            _ => {}
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
