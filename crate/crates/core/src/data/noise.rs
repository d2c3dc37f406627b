use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Uniform,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub kind: NoiseKind,
    pub percent: f64,
    /// `observed == clean` for every sample of the dataset.
    pub clean_flags: Vec<bool>,
    /// Fraction of train-split samples whose observed label is wrong.
    pub realized_fraction: f64,
    /// Same fraction per clean class (NaN-free: classes absent from train report 0).
    pub per_class_rates: Vec<f64>,
    pub mapping: Option<Vec<usize>>,
}

impl CorruptionReport {
    fn new(ds: &Dataset, kind: NoiseKind, percent: f64, mapping: Option<Vec<usize>>) -> Self {
        let train = ds.indices(Split::Train);
        let flags = ds.clean_flags();
        let mut per_class = vec![(0usize, 0usize); ds.class_count];
        for &i in &train {
            let c = &mut per_class[ds.clean_labels[i]];
            c.1 += 1;
            if !flags[i] {
                c.0 += 1;
            }
        }
        let corrupted = per_class.iter().map(|c| c.0).sum::<usize>();
        CorruptionReport {
            kind,
            percent,
            realized_fraction: corrupted as f64 / train.len().max(1) as f64,
            per_class_rates: per_class
                .iter()
                .map(|&(bad, total)| {
                    if total == 0 {
                        0.0
                    } else {
                        bad as f64 / total as f64
                    }
                })
                .collect(),
            clean_flags: flags,
            mapping,
        }
    }
}

fn check_percent(p: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&p) {
        return Err(invalid(format!(
            "noise percent must lie in [0, 100], got {p}"
        )));
    }
    Ok(())
}

/// Each train-split sample independently, with probability `p/100`, takes a
/// label drawn uniformly from the classes other than its clean label.
pub fn inject_uniform_noise(
    dataset: &Dataset,
    p: f64,
    seed: u64,
) -> Result<(Dataset, CorruptionReport)> {
    check_percent(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    let classes = out.class_count;
    for i in out.indices(Split::Train) {
        // always draw both numbers so the stream does not depend on p
        let coin: f64 = rng.random();
        let shift = rng.random_range(1..classes);
        if coin < p / 100.0 {
            out.observed_labels[i] = (out.clean_labels[i] + shift) % classes;
        }
    }
    let report = CorruptionReport::new(&out, NoiseKind::Uniform, p, None);
    Ok((out, report))
}

/// `c → (c + 1) mod classes`.
pub fn cyclic_mapping(classes: usize) -> Vec<usize> {
    (0..classes).map(|c| (c + 1) % classes).collect()
}

/// Relabels a uniformly chosen `round(p/100 · n_train)` subset of the train
/// split with `mapping[clean label]`. `mapping` must be a derangement.
pub fn inject_adversarial_noise(
    dataset: &Dataset,
    p: f64,
    mapping: &[usize],
    seed: u64,
) -> Result<(Dataset, CorruptionReport)> {
    check_percent(p)?;
    let classes = dataset.class_count;
    if mapping.len() != classes {
        return Err(invalid(format!(
            "mapping covers {} classes, dataset has {classes}",
            mapping.len()
        )));
    }
    let mut seen = vec![false; classes];
    for (c, &m) in mapping.iter().enumerate() {
        if m >= classes || seen[m] {
            return Err(invalid("mapping is not a permutation of the classes"));
        }
        if m == c {
            return Err(invalid(format!("mapping has a fixed point at class {c}")));
        }
        seen[m] = true;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    let train = out.indices(Split::Train);
    let count = (p / 100.0 * train.len() as f64).round() as usize;
    for k in index::sample(&mut rng, train.len(), count) {
        let i = train[k];
        out.observed_labels[i] = mapping[out.clean_labels[i]];
    }
    let report = CorruptionReport::new(&out, NoiseKind::Adversarial, p, Some(mapping.to_vec()));
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, SplitFractions};
    use ndarray::Array2;

    fn balanced(n: usize, classes: usize) -> Dataset {
        let ds = Dataset::new(
            Array2::from_shape_fn((n, 3), |(i, j)| (i + j) as f64),
            (0..n).map(|i| i % classes).collect(),
            classes,
        )
        .unwrap();
        split(
            &ds,
            SplitFractions {
                train: 0.8,
                validation: 0.1,
                test: 0.1,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_percent_changes_nothing() {
        let ds = balanced(200, 4);
        let (u, r) = inject_uniform_noise(&ds, 0.0, 3).unwrap();
        assert_eq!(u, ds);
        assert_eq!(r.realized_fraction, 0.0);
        let (a, _) = inject_adversarial_noise(&ds, 0.0, &cyclic_mapping(4), 3).unwrap();
        assert_eq!(a, ds);
    }

    #[test]
    fn full_uniform_noise_flips_every_train_label() {
        let ds = balanced(300, 3);
        let (u, r) = inject_uniform_noise(&ds, 100.0, 8).unwrap();
        for i in 0..u.len() {
            if u.splits[i] == Split::Train {
                assert_ne!(u.observed_labels[i], u.clean_labels[i]);
            } else {
                assert_eq!(u.observed_labels[i], u.clean_labels[i]);
            }
        }
        assert_eq!(r.realized_fraction, 1.0);
        assert_eq!(u.clean_labels, ds.clean_labels);
        assert_eq!(u.features, ds.features);
    }

    #[test]
    fn uniform_rate_concentrates() {
        // sd of the fraction is sqrt(.6 * .4 / 8000) ≈ 0.0055; ±0.02 is > 3.6 sd
        let ds = balanced(10_000, 10);
        let (_, r) = inject_uniform_noise(&ds, 60.0, 21).unwrap();
        assert!(
            (r.realized_fraction - 0.6).abs() < 0.02,
            "{}",
            r.realized_fraction
        );
    }

    #[test]
    fn adversarial_full_swap() {
        let ds = balanced(100, 2);
        let (a, _) = inject_adversarial_noise(&ds, 100.0, &[1, 0], 0).unwrap();
        for i in a.indices(Split::Train) {
            assert_eq!(a.observed_labels[i], 1 - a.clean_labels[i]);
        }
    }

    #[test]
    fn adversarial_per_class_rates() {
        let ds = balanced(10_000, 10);
        let (_, r) = inject_adversarial_noise(&ds, 60.0, &cyclic_mapping(10), 4).unwrap();
        assert!((r.realized_fraction - 0.6).abs() < 1e-3);
        for rate in &r.per_class_rates {
            assert!((rate - 0.6).abs() < 0.03, "{rate}");
        }
    }

    #[test]
    fn mapping_validation() {
        let ds = balanced(40, 3);
        assert!(inject_adversarial_noise(&ds, 10.0, &[0, 2, 1], 0).is_err());
        assert!(inject_adversarial_noise(&ds, 10.0, &[1, 1, 0], 0).is_err());
        assert!(inject_adversarial_noise(&ds, 10.0, &[1, 0], 0).is_err());
        assert!(inject_uniform_noise(&ds, 101.0, 0).is_err());
    }

    #[test]
    fn rerun_with_zero_keeps_corruption() {
        let ds = balanced(500, 5);
        let (noisy, _) = inject_uniform_noise(&ds, 40.0, 2).unwrap();
        let (again, _) = inject_uniform_noise(&noisy, 0.0, 9).unwrap();
        assert_eq!(again, noisy);
    }
}
