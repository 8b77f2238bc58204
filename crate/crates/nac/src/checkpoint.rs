//! Single-file tensor checkpoints.
//!
//! Byte layout, exactly:
//!
//! ```text
//! bytes 0..8    header length `L` as little-endian u64
//! bytes 8..8+L  UTF-8 JSON: an array of {"name", "shape", "dtype": "f64", "byte_offset"}
//! bytes 8+L..   raw blob: each tensor's values as little-endian f64, row-major,
//!               starting at its `byte_offset` relative to the blob start
//! ```
//!
//! Entries are written sorted by name so identical parameter sets produce
//! identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

pub fn save(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut sorted: Vec<&(String, &Tensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));

    let mut header = Vec::with_capacity(sorted.len());
    let mut offset = 0u64;
    for (name, t) in &sorted {
        header.push(HeaderEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".to_string(),
            byte_offset: offset,
        });
        offset += (t.numel() * 8) as u64;
    }
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in &sorted {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Vec<HeaderEntry> = serde_json::from_slice(&header_bytes)?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;

    let mut out = Vec::with_capacity(header.len());
    for entry in header {
        if entry.dtype != "f64" {
            return Err(Error::arg(format!(
                "unsupported dtype {:?} for tensor {}",
                entry.dtype, entry.name
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + numel * 8;
        if end > blob.len() {
            return Err(Error::arg(format!("checkpoint blob truncated at {}", entry.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((entry.name, Tensor::from_vec(entry.shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let a = Tensor::from_vec(vec![2, 3], vec![1.5, -0.25, 3e-300, 0.0, -1.0, 42.0]).unwrap();
        let b = Tensor::from_vec(vec![1], vec![std::f64::consts::PI]).unwrap();
        save(&path, &[("zeta".to_string(), &a), ("alpha".to_string(), &b)]).unwrap();

        let loaded = load(&path).unwrap();
        // entries come back sorted by name
        assert_eq!(loaded[0].0, "alpha");
        assert_eq!(loaded[1].0, "zeta");
        assert_eq!(loaded[1].1.shape(), &[2, 3]);
        for (x, y) in loaded[1].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(loaded[0].1.data()[0].to_bits(), b.data()[0].to_bits());
    }

    #[test]
    fn header_layout_matches_documentation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layout.ckpt");
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        save(&path, &[("x".to_string(), &a)]).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header[0]["name"], "x");
        assert_eq!(header[0]["dtype"], "f64");
        assert_eq!(header[0]["byte_offset"], 0);
        let blob = &bytes[8 + hlen..];
        assert_eq!(f64::from_le_bytes(blob[0..8].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(blob[8..16].try_into().unwrap()), 2.0);
    }
}
