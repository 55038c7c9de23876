//! On-disk matrix format and JSON plumbing.
//!
//! Binary layout (ZDCM v1, little-endian): magic bytes `ZDCM`, u32 row
//! count, u32 column count, then rows * cols f64 values row-major. Every
//! binary artifact is written next to a JSON mirror with identical numeric
//! content; JSON f64 serialization is shortest-round-trip, so the mirror
//! parses back to the same bits.

use crate::error::Error;
use crate::tensor::Matrix;
use crate::Result;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ZDCM";

pub fn write_zdcm(m: &Matrix, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + m.data().len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_zdcm(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::BadArtifact {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 {
        return Err(bad("shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + rows * cols * 8;
    if bytes.len() != expected {
        return Err(bad(&format!("payload is {} bytes, expected {expected}", bytes.len())));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[12..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::BadArtifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// JSON mirror of a matrix artifact.
#[derive(Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub fn write_matrix_json(m: &Matrix, path: &Path) -> Result<()> {
    let mirror = MatrixJson { rows: m.rows(), cols: m.cols(), data: m.data().to_vec() };
    save_json(&mirror, path)
}

pub fn read_matrix_json(path: &Path) -> Result<Matrix> {
    let mirror: MatrixJson = load_json(path)?;
    Matrix::from_vec(mirror.rows, mirror.cols, mirror.data).map_err(|e| Error::BadArtifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Writes `<dir>/<name>.zdcm` and its `<name>.json` mirror.
pub fn write_matrix_pair(m: &Matrix, dir: &Path, name: &str) -> Result<()> {
    write_zdcm(m, &dir.join(format!("{name}.zdcm")))?;
    write_matrix_json(m, &dir.join(format!("{name}.json")))
}

/// Reads `<dir>/<name>.zdcm`.
pub fn read_matrix_pair(dir: &Path, name: &str) -> Result<Matrix> {
    read_zdcm(&dir.join(format!("{name}.zdcm")))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
