//! Uncompressed IDX image/label files (the MNIST layout).

use std::path::Path;

use dualgn_core::{Dataset, OutputBlock};

use crate::error::{CliError, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn bad(path: &Path, reason: impl Into<String>) -> CliError {
    CliError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| bad(path, "truncated header"))
}

/// Returns `(count, rows * cols, pixels in [0, 1])`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(bad(path, format!("image magic {magic:#x}, expected {IMAGES_MAGIC:#x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let len = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != len {
        return Err(bad(path, format!("expected {len} pixel bytes, found {}", body.len())));
    }
    Ok((n, rows * cols, body.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(bad(path, format!("label magic {magic:#x}, expected {LABELS_MAGIC:#x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(bad(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

/// One-hot targets with `k = max label + 1` classes.
pub fn load(images: &Path, labels: &Path, seed: u64) -> Result<Dataset> {
    let (n, dim, pixels) = parse_images(&read(images)?, images)?;
    let ys = parse_labels(&read(labels)?, labels)?;
    if ys.len() != n {
        return Err(bad(labels, format!("{} labels for {n} images", ys.len())));
    }
    let k = ys.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut targets = vec![0.0; n * k];
    for (i, &y) in ys.iter().enumerate() {
        targets[i * k + y as usize] = 1.0;
    }
    Ok(Dataset::new(pixels, dim, OutputBlock::from_vec(n, k, targets)?, seed)?)
}

/// Encodes images and labels in IDX form.
pub fn encode(images: &[u8], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let n = labels.len();
    let mut img = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend(v.to_be_bytes());
    }
    img.extend(images);
    let mut lbl = Vec::with_capacity(8 + n);
    for v in [LABELS_MAGIC, n as u32] {
        lbl.extend(v.to_be_bytes());
    }
    lbl.extend(labels);
    (img, lbl)
}
