use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Split};
use crate::error::{invalid, Error, Result};

/// Geometric long-tail profile `n_c = round(n_max · μ^{c/(C-1)})`, `μ = 1/factor`.
pub fn long_tail_counts(n_max: usize, classes: usize, factor: f64) -> Result<Vec<usize>> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(invalid(format!(
            "imbalance factor must be >= 1, got {factor}"
        )));
    }
    if classes < 2 {
        return Err(invalid("need at least two classes"));
    }
    let mu = 1.0 / factor;
    let counts: Vec<usize> = (0..classes)
        .map(|c| (n_max as f64 * mu.powf(c as f64 / (classes - 1) as f64)).round() as usize)
        .collect();
    if counts.contains(&0) {
        return Err(Error::Degenerate(format!(
            "imbalance factor {factor} leaves an empty class with n_max = {n_max}"
        )));
    }
    Ok(counts)
}

/// Subsamples the train split (by clean label) to a geometric long-tail profile.
///
/// `n_max` is the largest per-class train count; class `c` keeps
/// `min(available_c, n_c)` samples drawn without replacement. Other splits are
/// untouched and sample ids are carried through.
pub fn build_imbalanced(dataset: &Dataset, factor: f64, seed: u64) -> Result<Dataset> {
    let mut by_class = vec![Vec::new(); dataset.class_count];
    for i in dataset.indices(Split::Train) {
        by_class[dataset.clean_labels[i]].push(i);
    }
    let n_max = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let targets = long_tail_counts(n_max, dataset.class_count, factor)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; dataset.len()];
    for (members, &target) in by_class.iter().zip(&targets) {
        if members.len() <= target {
            continue;
        }
        for i in members {
            keep[*i] = false;
        }
        for k in index::sample(&mut rng, members.len(), target) {
            keep[members[k]] = true;
        }
    }
    let kept: Vec<usize> = (0..dataset.len()).filter(|&i| keep[i]).collect();
    Ok(dataset.subset(&kept))
}
