//! MNIST-style IDX files.
//!
//! Images: magic `0x00000803`, then count, rows and columns as big-endian
//! `u32`, then one unsigned byte per pixel. Labels: magic `0x00000801`, count,
//! one byte per label.

use std::fs;
use std::path::Path;

use super::data::Dataset;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx("truncated header".into()))
}

/// Parses image bytes into `(count, rows * cols, pixels scaled to [0, 1])`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Idx(format!("image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * dim {
        return Err(Error::Idx(format!(
            "expected {} pixel bytes, found {}",
            n * dim,
            body.len()
        )));
    }
    Ok((n, dim, body.iter().map(|&p| p as f64 / 255.0).collect()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Idx(format!("label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Idx(format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

/// Reads an image/label pair. `limit` keeps only the first samples.
pub fn read_idx(images: &Path, labels: &Path, classes: usize, limit: Option<usize>) -> Result<Dataset> {
    let (n, dim, mut pixels) = parse_images(&fs::read(images)?)?;
    let mut ys: Vec<usize> = parse_labels(&fs::read(labels)?)?.into_iter().map(usize::from).collect();
    if ys.len() != n {
        return Err(Error::Idx(format!("{n} images but {} labels", ys.len())));
    }
    if let Some(m) = limit.filter(|&m| m < n) {
        pixels.truncate(m * dim);
        ys.truncate(m);
    }
    Dataset::new(pixels, ys, dim, classes)
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
