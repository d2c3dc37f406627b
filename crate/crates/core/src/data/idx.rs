//! IDX files (the MNIST container format). Big-endian; images carry magic
//! `0x00000803` followed by count, rows and columns, labels carry
//! `0x00000801` followed by count. Gzipped files are detected by their header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array2;

use super::Dataset;
use crate::error::{format_err, Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| format_err("IDX", format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err("IDX", "truncated header"))
}

/// Parses an image file into `count × (rows · cols)` pixels scaled to `[0, 1]`.
pub fn read_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err("IDX images", format!("bad magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * dim {
        return Err(format_err(
            "IDX images",
            format!(
                "truncated: need {} pixel bytes, found {}",
                count * dim,
                body.len()
            ),
        ));
    }
    Ok(Array2::from_shape_fn((count, dim), |(i, j)| {
        body[i * dim + j] as f64 / 255.0
    }))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(format_err("IDX labels", format!("bad magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(format_err(
            "IDX labels",
            format!("truncated: need {count} labels, found {}", body.len()),
        ));
    }
    Ok(body[..count].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair into a dataset (every sample tagged train).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let features = read_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = read_idx_labels(&read_maybe_gz(labels_path)?)?;
    if features.nrows() != labels.len() {
        return Err(format_err(
            "IDX",
            format!("{} images but {} labels", features.nrows(), labels.len()),
        ));
    }
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, labels, classes)
}

pub fn write_idx_images<W: Write>(
    w: &mut W,
    rows: usize,
    cols: usize,
    pixels: &[Vec<u8>],
) -> Result<()> {
    w.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    w.write_all(&(pixels.len() as u32).to_be_bytes())?;
    w.write_all(&(rows as u32).to_be_bytes())?;
    w.write_all(&(cols as u32).to_be_bytes())?;
    for img in pixels {
        if img.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "IDX image",
                expected: rows * cols,
                found: img.len(),
            });
        }
        w.write_all(img)?;
    }
    Ok(())
}

pub fn write_idx_labels<W: Write>(w: &mut W, labels: &[u8]) -> Result<()> {
    w.write_all(&LABEL_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}
