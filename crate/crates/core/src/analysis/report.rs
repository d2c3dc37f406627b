use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DStatistics;
use crate::error::{format_err, Error, Result};

/// Mean and sample standard deviation of the finite values of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Non-finite entries (failed runs).
    pub missing: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let ok: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n = ok.len();
    let mean = if n == 0 {
        f64::NAN
    } else {
        ok.iter().sum::<f64>() / n as f64
    };
    let std = match n {
        0 => f64::NAN,
        1 => 0.0,
        _ => (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt(),
    };
    Summary {
        mean,
        std,
        n,
        missing: values.len() - n,
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.n == 0 {
            return write!(f, "missing");
        }
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)?;
        if self.missing > 0 {
            write!(f, " ({} missing)", self.missing)?;
        }
        Ok(())
    }
}

/// Tab-separated `method × metric` table of `mean ± std` cells.
pub fn format_method_table(metrics: &[&str], rows: &[(String, Vec<Summary>)]) -> String {
    let mut out = String::from("method");
    for m in metrics {
        out.push('\t');
        out.push_str(m);
    }
    out.push('\n');
    for (method, cells) in rows {
        out.push_str(method);
        for c in cells {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
    }
    out
}

/// `run  min  5%-quantile  #inf  N` rows.
pub fn format_d_table(rows: &[(String, DStatistics)]) -> String {
    let mut out = String::from("run\tmin\tquantile_5\tinf\tcount\n");
    for (name, d) in rows {
        let _ = writeln!(
            out,
            "{name}\t{:.4}\t{:.4}\t{}\t{}",
            d.min, d.quantile_5, d.infinite, d.count
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRecord {
    pub method: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_long_format(path: &Path, records: &[LongRecord]) -> Result<()> {
    let mut out = String::from("method\tseed\tmetric\tvalue\n");
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}\t{:?}", r.method, r.seed, r.metric, r.value);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(hash_bytes(&fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub sha256: String,
}

/// Config snapshot and content hashes of every file a run read or wrote.
/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, ManifestEntry>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn new(config: &str, seed: u64) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.to_string(),
            config_sha256: hash_bytes(config.as_bytes()),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Loads `dir/manifest.json`, or starts a new manifest when there is none.
    pub fn open(dir: &Path, config: &str, seed: u64) -> Result<Self> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Ok(Self::new(config, seed));
        }
        let mut m: RunManifest = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| format_err("manifest", e.to_string()))?;
        m.config = config.to_string();
        m.config_sha256 = hash_bytes(config.as_bytes());
        m.seed = seed;
        Ok(m)
    }

    pub fn record_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(label.to_string(), hash_file(path)?);
        Ok(())
    }

    /// Hashes `dir/rel` and files it under `rel`.
    pub fn record_output(&mut self, dir: &Path, rel: &str, stage: &str) -> Result<()> {
        let sha256 = hash_file(&dir.join(rel))?;
        self.outputs.insert(
            rel.to_string(),
            ManifestEntry {
                stage: stage.to_string(),
                sha256,
            },
        );
        Ok(())
    }

    /// Records every regular file under `dir/sub` (recursively).
    pub fn record_tree(&mut self, dir: &Path, sub: &str, stage: &str) -> Result<()> {
        let mut stack = vec![sub.to_string()];
        while let Some(rel) = stack.pop() {
            let full = dir.join(&rel);
            if full.is_dir() {
                let mut names: Vec<String> = fs::read_dir(&full)?
                    .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
                    .collect::<std::io::Result<_>>()?;
                names.sort();
                stack.extend(names.into_iter().map(|n| format!("{rel}/{n}")));
            } else {
                self.record_output(dir, &rel, stage)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| format_err("manifest", e.to_string()))?;
        fs::write(dir.join(Self::FILE), json + "\n")?;
        Ok(())
    }

    /// Outputs whose current content no longer matches the recorded hash.
    pub fn stale_outputs(&self, dir: &Path) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|(rel, e)| {
                hash_file(&dir.join(rel))
                    .map(|h| h != e.sha256)
                    .unwrap_or(true)
            })
            .map(|(rel, _)| rel.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_examples() {
        let s = summarize(&[0.9]);
        assert_eq!((s.mean, s.std, s.n), (0.9, 0.0, 1));
        let s = summarize(&[1.0, 2.0, 3.0, f64::NAN]);
        assert_eq!((s.mean, s.std, s.missing), (2.0, 1.0, 1));
        assert_eq!(s.to_string(), "2.00 ± 1.00 (1 missing)");
        assert_eq!(summarize(&[]).to_string(), "missing");
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            hash_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_tracks_outputs() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a.txt"), "x").unwrap();
        fs::write(dir.path().join("sub/b.txt"), "y").unwrap();
        let mut m = RunManifest::new("seed = 1", 1);
        m.record_output(dir.path(), "a.txt", "gen").unwrap();
        m.record_tree(dir.path(), "sub", "gen").unwrap();
        m.save(dir.path()).unwrap();
        let back = RunManifest::open(dir.path(), "seed = 1", 1).unwrap();
        assert_eq!(back, m);
        assert!(back.stale_outputs(dir.path()).is_empty());
        fs::write(dir.path().join("sub/b.txt"), "z").unwrap();
        assert_eq!(
            back.stale_outputs(dir.path()),
            vec!["sub/b.txt".to_string()]
        );
        assert!(m.record_output(dir.path(), "nope", "gen").is_err());
    }
}
