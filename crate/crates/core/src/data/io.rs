//! Tab-separated dataset snapshots.
//!
//! ```text
//! metasel-dataset	1
//! class_count	2
//! d	2
//! N	3
//! id	split	observed	clean	x0	x1
//! 0	train	1	1	-0.93	1.2
//! ...
//! ```
//!
//! Floats use the shortest representation that parses back to the same bits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Dataset, Split};
use crate::error::{format_err, Error, Result};

const MAGIC: &str = "metasel-dataset";
const VERSION: u32 = 1;

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}\t{VERSION}")?;
    writeln!(w, "class_count\t{}", ds.class_count)?;
    writeln!(w, "d\t{}", ds.dim())?;
    writeln!(w, "N\t{}", ds.len())?;
    write!(w, "id\tsplit\tobserved\tclean")?;
    for j in 0..ds.dim() {
        write!(w, "\tx{j}")?;
    }
    writeln!(w)?;
    for i in 0..ds.len() {
        write!(
            w,
            "{}\t{}\t{}\t{}",
            ds.ids[i],
            ds.splits[i].as_str(),
            ds.observed_labels[i],
            ds.clean_labels[i]
        )?;
        for v in ds.features.row(i) {
            write!(w, "\t{v:?}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn bad(reason: impl Into<String>) -> Error {
    format_err("dataset", reason)
}

fn header_field(line: Option<std::io::Result<String>>, key: &str) -> Result<usize> {
    let line = line.ok_or_else(|| bad(format!("missing `{key}` header")))??;
    let (k, v) = line
        .split_once('\t')
        .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
    if k != key {
        return Err(bad(format!("expected `{key}` header, found `{k}`")));
    }
    v.trim()
        .parse()
        .map_err(|_| bad(format!("`{key}` is not a count: `{v}`")))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| bad("empty file"))??;
    if first != format!("{MAGIC}\t{VERSION}") {
        return Err(bad(format!("unrecognised header `{first}`")));
    }
    let class_count = header_field(lines.next(), "class_count")?;
    let d = header_field(lines.next(), "d")?;
    let n = header_field(lines.next(), "N")?;
    lines.next().ok_or_else(|| bad("missing column header"))??;

    let mut features = Array2::zeros((n, d));
    let mut ids = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let mut observed = Vec::with_capacity(n);
    let mut clean = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("expected {n} records, found {i}")))??;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 + d {
            return Err(bad(format!(
                "record {i}: expected {} columns, found {}",
                4 + d,
                cols.len()
            )));
        }
        let int = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| bad(format!("record {i}: bad integer `{s}`")))
        };
        ids.push(int(cols[0])?);
        splits.push(
            Split::parse(cols[1])
                .ok_or_else(|| bad(format!("record {i}: bad split `{}`", cols[1])))?,
        );
        observed.push(int(cols[2])? as usize);
        clean.push(int(cols[3])? as usize);
        for j in 0..d {
            features[[i, j]] = cols[4 + j]
                .parse()
                .map_err(|_| bad(format!("record {i}: bad value `{}`", cols[4 + j])))?;
        }
    }
    if let Some(extra) = lines.next() {
        if !extra?.trim().is_empty() {
            return Err(bad(format!("more than {n} records")));
        }
    }
    let ds = Dataset {
        features,
        observed_labels: observed,
        clean_labels: clean,
        splits,
        ids,
        class_count,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_mixture, inject_uniform_noise, GaussianMixtureSpec};

    #[test]
    fn round_trip_is_exact() {
        let ds = gen_gaussian_mixture(&GaussianMixtureSpec::default(), 7).unwrap();
        let (mut ds, _) = inject_uniform_noise(&ds, 30.0, 1).unwrap();
        ds.features[[0, 0]] = 0.1 + 0.2;
        ds.features[[1, 1]] = -f64::MIN_POSITIVE;
        ds.splits[2] = Split::MetaCandidate;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.tsv");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.features.iter().zip(&ds.features) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_damaged_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.tsv");
        assert!(matches!(read_dataset(&path), Err(Error::MissingInput(_))));

        let text = "metasel-dataset\t1\nclass_count\t2\nd\t1\nN\t2\nid\tsplit\tobserved\tclean\tx0\n0\ttrain\t0\t0\t1.5\n";
        std::fs::write(&path, text).unwrap();
        assert!(read_dataset(&path).is_err());

        let text = "metasel-dataset\t1\nclass_count\t2\nd\t1\nN\t1\nid\tsplit\tobserved\tclean\tx0\n0\ttrain\t0\t5\t1.5\n";
        std::fs::write(&path, text).unwrap();
        assert!(read_dataset(&path).is_err());

        let text = "metasel-dataset\t1\nclass_count\t2\nd\t1\nN\t1\nid\tsplit\tobserved\tclean\tx0\n0\tholdout\t0\t1\t1.5\n";
        std::fs::write(&path, text).unwrap();
        assert!(read_dataset(&path).is_err());
    }
}
