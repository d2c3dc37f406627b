//! On-disk layout of a run:
//!
//! ```text
//! <dir>/checkpoints/    per-epoch parameters (see CheckpointStore::save_dir)
//! <dir>/final.params
//! <dir>/meta.tsv        sample_id of every meta sample
//! <dir>/weights.tsv     epoch, sample_id, weight
//! <dir>/metrics.tsv     epoch, split, accuracy
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{EpochMetrics, RunArtifacts, WeightVector};
use crate::data::Dataset;
use crate::error::{format_err, Error, Result};
use crate::nn::{read_params, write_params, CheckpointStore};

pub fn write_weight_trajectory(path: &Path, run: &RunArtifacts, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch\tsample_id\tweight")?;
    for (e, weights) in run.trajectory.iter().enumerate() {
        for (&i, v) in run.pool.iter().zip(&weights.w) {
            writeln!(w, "{}\t{}\t{v:?}", e + 1, ds.ids[i])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch\tsplit\taccuracy")?;
    for m in metrics {
        for (split, acc) in [
            ("train", m.train),
            ("validation", m.validation),
            ("test", m.test),
        ] {
            writeln!(w, "{}\t{split}\t{acc:?}", m.epoch)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_artifacts(dir: &Path, run: &RunArtifacts, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    run.checkpoints.save_dir(&dir.join("checkpoints"))?;
    write_params(
        &mut BufWriter::new(File::create(dir.join("final.params"))?),
        &run.params,
    )?;
    let mut meta = String::from("sample_id\n");
    for &i in &run.meta {
        meta.push_str(&format!("{}\n", ds.ids[i]));
    }
    fs::write(dir.join("meta.tsv"), meta)?;
    write_weight_trajectory(&dir.join("weights.tsv"), run, ds)?;
    write_metrics(&dir.join("metrics.tsv"), &run.metrics)?;
    Ok(())
}

fn table(path: &Path, kind: &'static str, columns: usize) -> Result<Vec<Vec<String>>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut rows = Vec::new();
    for line in BufReader::new(File::open(path)?).lines().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<String> = line.split('\t').map(str::to_owned).collect();
        if cols.len() != columns {
            return Err(format_err(
                kind,
                format!("expected {columns} columns in `{line}`"),
            ));
        }
        rows.push(cols);
    }
    Ok(rows)
}

fn num<T: std::str::FromStr>(s: &str, kind: &'static str) -> Result<T> {
    s.parse()
        .map_err(|_| format_err(kind, format!("bad number `{s}`")))
}

/// Reads a run written by [`save_artifacts`]; sample ids are resolved against `ds`.
pub fn load_artifacts(dir: &Path, ds: &Dataset) -> Result<RunArtifacts> {
    let checkpoints = CheckpointStore::load_dir(&dir.join("checkpoints"))?;
    let final_path = dir.join("final.params");
    if !final_path.exists() {
        return Err(Error::MissingInput(final_path));
    }
    let params = read_params(&mut BufReader::new(File::open(final_path)?))?;
    let by_id: HashMap<u64, usize> = ds.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let resolve = |id: u64| {
        by_id
            .get(&id)
            .copied()
            .ok_or_else(|| format_err("run", format!("sample id {id} not in dataset")))
    };

    let mut meta = Vec::new();
    for row in table(&dir.join("meta.tsv"), "meta table", 1)? {
        meta.push(resolve(num(&row[0], "meta table")?)?);
    }

    let mut pool = Vec::new();
    let mut trajectory: Vec<WeightVector> = Vec::new();
    for row in table(&dir.join("weights.tsv"), "weight table", 3)? {
        let epoch: usize = num(&row[0], "weight table")?;
        let i = resolve(num(&row[1], "weight table")?)?;
        let w: f64 = num(&row[2], "weight table")?;
        if epoch == 0 || epoch > trajectory.len() + 1 {
            return Err(format_err(
                "weight table",
                format!("epoch {epoch} out of order"),
            ));
        }
        if epoch > trajectory.len() {
            trajectory.push(WeightVector { w: Vec::new() });
        }
        let wv = trajectory.last_mut().expect("pushed above");
        if epoch == 1 {
            pool.push(i);
        } else if pool.get(wv.w.len()) != Some(&i) {
            return Err(format_err(
                "weight table",
                "sample order differs between epochs",
            ));
        }
        wv.w.push(w);
    }

    let mut metrics: Vec<EpochMetrics> = Vec::new();
    for row in table(&dir.join("metrics.tsv"), "metrics table", 3)? {
        let epoch: usize = num(&row[0], "metrics table")?;
        let acc: f64 = num(&row[2], "metrics table")?;
        if metrics.last().map(|m| m.epoch) != Some(epoch) {
            metrics.push(EpochMetrics {
                epoch,
                train: f64::NAN,
                validation: f64::NAN,
                test: f64::NAN,
            });
        }
        let m = metrics.last_mut().expect("pushed above");
        match row[1].as_str() {
            "train" => m.train = acc,
            "validation" => m.validation = acc,
            "test" => m.test = acc,
            other => {
                return Err(format_err(
                    "metrics table",
                    format!("unknown split `{other}`"),
                ))
            }
        }
    }
    if trajectory.is_empty() {
        trajectory = vec![WeightVector { w: Vec::new() }; metrics.len()];
    }
    Ok(RunArtifacts {
        params,
        checkpoints,
        pool,
        meta,
        trajectory,
        metrics,
    })
}
