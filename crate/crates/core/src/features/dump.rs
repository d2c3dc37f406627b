//! Binary feature dumps.
//!
//! Little-endian: magic `MSFEATS1`, version `u32`, `N: u64`, `dim: u64`,
//! layout as a length-prefixed JSON document (method, mode, checkpoint ids,
//! block dims, layer plans), `N` sample ids as `u64`, then the `N × dim`
//! matrix row-major as `f64`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{FeatureLayout, FeatureMatrix};
use crate::data::Dataset;
use crate::error::{format_err, Error, Result};

const MAGIC: &[u8; 8] = b"MSFEATS1";
const VERSION: u32 = 1;

pub fn write_features(path: &Path, features: &FeatureMatrix, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (n, dim) = features.data.dim();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&(dim as u64).to_le_bytes())?;
    let layout = serde_json::to_vec(&features.layout)
        .map_err(|e| format_err("feature dump", e.to_string()))?;
    w.write_all(&(layout.len() as u32).to_le_bytes())?;
    w.write_all(&layout)?;
    for &i in &features.rows {
        w.write_all(&ds.ids[i].to_le_bytes())?;
    }
    for v in features.data.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn take<const K: usize>(r: &mut impl Read) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf)
        .map_err(|_| format_err("feature dump", "truncated"))?;
    Ok(buf)
}

/// Reads a dump, mapping its sample ids back to indices of `ds`.
pub fn read_features(path: &Path, ds: &Dataset) -> Result<FeatureMatrix> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    if &take::<8>(&mut r)? != MAGIC {
        return Err(format_err("feature dump", "bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(format_err(
            "feature dump",
            format!("unsupported version {version}"),
        ));
    }
    let n = u64::from_le_bytes(take(&mut r)?) as usize;
    let dim = u64::from_le_bytes(take(&mut r)?) as usize;
    let len = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| format_err("feature dump", "truncated layout"))?;
    let layout: FeatureLayout = serde_json::from_slice(&json)
        .map_err(|e| format_err("feature dump", format!("layout: {e}")))?;
    if layout.dim() != dim {
        return Err(format_err(
            "feature dump",
            "layout does not match the stored dimension",
        ));
    }
    let by_id: HashMap<u64, usize> = ds.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let id = u64::from_le_bytes(take(&mut r)?);
        rows.push(
            *by_id.get(&id).ok_or_else(|| {
                format_err("feature dump", format!("sample id {id} not in dataset"))
            })?,
        );
    }
    let mut data = Array2::zeros((n, dim));
    for v in data.iter_mut() {
        *v = f64::from_le_bytes(take(&mut r)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(format_err("feature dump", "trailing bytes"));
    }
    Ok(FeatureMatrix { data, rows, layout })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureMethod, LayerSamplingPlan};
    use crate::nn::GradMode;
    use ndarray::array;

    #[test]
    fn round_trip() {
        let ds = Dataset::new(Array2::zeros((5, 1)), vec![0, 1, 0, 1, 1], 2).unwrap();
        let fm = FeatureMatrix {
            data: array![[1.0, -0.5, 1e-300], [0.1 + 0.2, f64::MAX, -0.0]],
            rows: vec![4, 1],
            layout: FeatureLayout {
                method: FeatureMethod::Gbc,
                mode: GradMode::LabelFree,
                raw: false,
                checkpoints: vec![7],
                block_dims: vec![3],
                plans: vec![LayerSamplingPlan {
                    masses: vec![0.1, 0.30000000000000004],
                    total: 0.4,
                    draws: vec![1, 1],
                    scales: vec![0.8, 0.8],
                    raw: false,
                }],
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_features(&path, &fm, &ds).unwrap();
        let back = read_features(&path, &ds).unwrap();
        assert_eq!(back, fm);
        assert_eq!(back.data[[1, 2]].to_bits(), (-0.0f64).to_bits());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_features(&path, &ds).is_err());
    }
}
