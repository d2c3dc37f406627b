//! Datasets: synthesis, IDX ingestion, label corruption, long-tail subsampling
//! and splitting.

mod idx;
mod imbalance;
mod io;
mod noise;
mod synth;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use imbalance::{build_imbalanced, long_tail_counts};
pub use io::{read_dataset, write_dataset};
pub use noise::{
    cyclic_mapping, inject_adversarial_noise, inject_uniform_noise, CorruptionReport, NoiseKind,
};
pub use synth::{gen_gaussian_mixture, GaussianMixtureSpec, LabelRule};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    MetaCandidate,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::MetaCandidate => "meta_candidate",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "meta_candidate" => Some(Split::MetaCandidate),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    /// Train and meta-candidate samples both belong to the (possibly noisy) training pool.
    pub fn is_training(self) -> bool {
        matches!(self, Split::Train | Split::MetaCandidate)
    }
}

/// A labelled corpus. `clean_labels` is the simulation ground truth and is
/// never shown to training except for samples promoted to the meta set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub observed_labels: Vec<usize>,
    pub clean_labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// Stable identity of each sample, preserved through subsampling.
    pub ids: Vec<u64>,
    pub class_count: usize,
}

impl Dataset {
    /// A dataset with clean observed labels, every sample tagged `Train` and ids `0..n`.
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = features.nrows();
        let ds = Dataset {
            features,
            observed_labels: labels.clone(),
            clean_labels: labels,
            splits: vec![Split::Train; n],
            ids: (0..n as u64).collect(),
            class_count,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        for (what, len) in [
            ("observed labels", self.observed_labels.len()),
            ("clean labels", self.clean_labels.len()),
            ("split tags", self.splits.len()),
            ("sample ids", self.ids.len()),
        ] {
            if len != n {
                return Err(invalid(format!(
                    "{what}: expected {n} entries, found {len}"
                )));
            }
        }
        if self.class_count < 2 {
            return Err(invalid("a dataset needs at least two classes"));
        }
        if let Some(&label) = self
            .observed_labels
            .iter()
            .chain(&self.clean_labels)
            .find(|&&y| y >= self.class_count)
        {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.class_count,
            });
        }
        if !self.features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Every sample whose tag is `Train` or `MetaCandidate`.
    pub fn training_pool(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i].is_training())
            .collect()
    }

    /// Feature rows for `indices`, in that order.
    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), indices)
    }

    pub fn observed(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.observed_labels[i]).collect()
    }

    pub fn clean(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.clean_labels[i]).collect()
    }

    /// Whether each sample's observed label equals its clean label.
    pub fn clean_flags(&self) -> Vec<bool> {
        self.observed_labels
            .iter()
            .zip(&self.clean_labels)
            .map(|(a, b)| a == b)
            .collect()
    }

    /// Keeps only `indices` (in the given order), carrying ids along.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.rows(indices),
            observed_labels: self.observed(indices),
            clean_labels: self.clean(indices),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            class_count: self.class_count,
        }
    }
}

/// Fractions of a random train/validation/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const TOY: SplitFractions = SplitFractions {
        train: 0.6,
        validation: 0.16,
        test: 0.24,
    };
}

/// Seeded random partition into train/validation/test tags.
///
/// Sizes are `round(f · n)` for train and validation, the remainder goes to
/// test. A split with a positive fraction must not end up empty.
pub fn split(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Dataset> {
    let SplitFractions {
        train,
        validation,
        test,
    } = fractions;
    if [train, validation, test]
        .iter()
        .any(|f| !(0.0..=1.0).contains(f))
    {
        return Err(invalid("split fractions must lie in [0, 1]"));
    }
    if ((train + validation + test) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!(
            "split fractions must sum to 1, got {}",
            train + validation + test
        )));
    }
    let n = dataset.len();
    let n_train = (train * n as f64).round() as usize;
    let n_val = ((validation * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    for (name, frac, size) in [
        ("train split", train, n_train),
        ("validation split", validation, n_val),
        ("test split", test, n_test),
    ] {
        if frac > 0.0 && size == 0 {
            return Err(Error::Empty(name));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = dataset.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(n: usize) -> Dataset {
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        Dataset::new(features, (0..n).map(|i| i % 2).collect(), 2).unwrap()
    }

    #[test]
    fn split_all_train() {
        let ds = split(
            &plain(10),
            SplitFractions {
                train: 1.0,
                validation: 0.0,
                test: 0.0,
            },
            3,
        )
        .unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 10);
    }

    #[test]
    fn split_sizes_and_coverage() {
        let ds = split(&plain(1000), SplitFractions::TOY, 9).unwrap();
        let (tr, va, te) = (
            ds.indices(Split::Train),
            ds.indices(Split::Validation),
            ds.indices(Split::Test),
        );
        assert_eq!((tr.len(), va.len(), te.len()), (600, 160, 240));
        let mut all: Vec<usize> = tr.into_iter().chain(va).chain(te).collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn split_errors() {
        let bad = SplitFractions {
            train: 0.5,
            validation: 0.2,
            test: 0.2,
        };
        assert!(split(&plain(10), bad, 0).is_err());
        let tiny = SplitFractions {
            train: 0.9,
            validation: 0.05,
            test: 0.05,
        };
        assert!(matches!(split(&plain(4), tiny, 0), Err(Error::Empty(_))));
    }

    #[test]
    fn label_range_checked() {
        assert!(Dataset::new(Array2::zeros((2, 1)), vec![0, 3], 2).is_err());
    }
}
