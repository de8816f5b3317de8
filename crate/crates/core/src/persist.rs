//! Flat header + binary matrix files.
//!
//! A persisted object is a pair `<stem>.txt` (one `key=value` per line) and
//! `<stem>.bin` (little-endian `f64`s, each matrix row-major, concatenated in
//! the order the header lists them). Floats in headers use Rust's shortest
//! round-trip formatting, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.txt")), dir.join(format!("{stem}.bin")))
}

pub fn write_header(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Schema(format!("{}:{}: expected key=value", path.display(), lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn header_get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Schema(format!("missing header key `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Schema(format!("bad value `{raw}` for header key `{key}`")))
}

pub fn write_matrices(path: &Path, mats: &[&DMatrix<f64>]) -> Result<()> {
    let total: usize = mats.iter().map(|m| m.len()).sum();
    let mut bytes = Vec::with_capacity(total * 8);
    for m in mats {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_matrices(path: &Path, shapes: &[(usize, usize)]) -> Result<Vec<DMatrix<f64>>> {
    let bytes = fs::read(path)?;
    let expected: usize = shapes.iter().map(|(r, c)| r * c * 8).sum();
    if bytes.len() != expected {
        return Err(Error::Schema(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for &(r, c) in shapes {
        let mut m = DMatrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&bytes[offset..offset + 8]);
                m[(i, j)] = f64::from_le_bytes(buf);
                offset += 8;
            }
        }
        out.push(m);
    }
    Ok(out)
}
