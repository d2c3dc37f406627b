use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{BatchTrace, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    /// Lowest predictive entropy first.
    Certain,
    /// Highest predictive entropy first.
    Uncertain,
    /// Euclidean K-means on the features, nearest member per centroid.
    PlainKmeans,
}

/// Shannon entropy (nats) of the softmax output for every row.
pub fn predictive_entropy(params: &NetworkParams, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
    let probs = BatchTrace::forward(params, inputs)?.probabilities();
    Ok(probs
        .rows()
        .into_iter()
        .map(|p| {
            -p.iter()
                .filter(|&&v| v > 0.0)
                .map(|v| v * v.ln())
                .sum::<f64>()
        })
        .collect())
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from `m` distinct random rows; returns one distinct row
/// per centroid, the member nearest to it (or, for a cluster left empty, the
/// nearest row not already chosen).
pub fn plain_kmeans(
    features: ArrayView2<f64>,
    m: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Vec<usize>> {
    let n = features.nrows();
    if m == 0 || m > n {
        return Err(invalid(format!("cannot pick {m} centroids from {n} rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::zeros((m, features.ncols()));
    for (i, j) in index::sample(&mut rng, n, m).into_iter().enumerate() {
        centroids.row_mut(i).assign(&features.row(j));
    }
    let sq_norms: Vec<f64> = features.rows().into_iter().map(|r| r.dot(&r)).collect();
    let assign = |centroids: &Array2<f64>| -> Vec<usize> {
        let cross = features.dot(&centroids.t());
        let c_norms: Vec<f64> = centroids.rows().into_iter().map(|r| r.dot(&r)).collect();
        cross
            .rows()
            .into_iter()
            .zip(&sq_norms)
            .map(|(row, &gn)| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, (&x, &cn)) in row.iter().zip(&c_norms).enumerate() {
                    let d = gn - 2.0 * x + cn;
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                best
            })
            .collect()
    };
    let mut assignment = assign(&centroids);
    for _ in 0..max_iters {
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; m];
        for (row, &a) in features.rows().into_iter().zip(&assignment) {
            sums.row_mut(a).scaled_add(1.0, &row);
            counts[a] += 1;
        }
        for i in 0..m {
            if counts[i] > 0 {
                centroids
                    .row_mut(i)
                    .assign(&(&sums.row(i) / counts[i] as f64));
            }
        }
        let next = assign(&centroids);
        if next == assignment {
            break;
        }
        assignment = next;
    }

    let mut taken = vec![false; n];
    let mut picks = Vec::with_capacity(m);
    for i in 0..m {
        let c = centroids.row(i);
        let members = (0..n).filter(|&j| assignment[j] == i && !taken[j]);
        let nearest = |it: &mut dyn Iterator<Item = usize>| {
            it.map(|j| (j, sq_dist(features.row(j), c))).fold(
                None,
                |best: Option<(usize, f64)>, (j, d)| match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((j, d)),
                },
            )
        };
        let pick = nearest(&mut members.into_iter())
            .or_else(|| nearest(&mut (0..n).filter(|&j| !taken[j])))
            .expect("m <= n leaves a free row")
            .0;
        taken[pick] = true;
        picks.push(pick);
    }
    Ok(picks)
}

/// Picks `budget` positions among `candidates.len()` rows.
///
/// `entropy` (one value per candidate) drives the certain/uncertain kinds and
/// `features` the K-means kind. Returns positions into the candidate list.
pub fn baseline_select(
    kind: BaselineKind,
    count: usize,
    entropy: Option<&[f64]>,
    features: Option<ArrayView2<f64>>,
    budget: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if budget > count {
        return Err(invalid(format!(
            "budget {budget} exceeds {count} candidates"
        )));
    }
    match kind {
        BaselineKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks = index::sample(&mut rng, count, budget).into_vec();
            picks.sort_unstable();
            Ok(picks)
        }
        BaselineKind::Certain | BaselineKind::Uncertain => {
            let h = entropy.ok_or_else(|| invalid("entropy-ranked selection needs entropies"))?;
            if h.len() != count {
                return Err(Error::DimensionMismatch {
                    context: "entropies",
                    expected: count,
                    found: h.len(),
                });
            }
            let mut order: Vec<usize> = (0..count).collect();
            if kind == BaselineKind::Certain {
                order.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then(a.cmp(&b)));
            } else {
                order.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
            }
            order.truncate(budget);
            Ok(order)
        }
        BaselineKind::PlainKmeans => {
            let f = features.ok_or_else(|| invalid("plain K-means needs features"))?;
            if f.nrows() != count {
                return Err(Error::DimensionMismatch {
                    context: "baseline features",
                    expected: count,
                    found: f.nrows(),
                });
            }
            if budget == 0 {
                return Ok(Vec::new());
            }
            plain_kmeans(f, budget, seed, super::MAX_ITERS)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};
    use ndarray::{array, Array1};

    #[test]
    fn confident_sample_is_certain_first() {
        // one linear layer: logits = x
        let p = NetworkParams::new(
            vec![Layer {
                weight: Array2::eye(3),
                bias: Array1::zeros(3),
            }],
            Activation::Relu,
        )
        .unwrap();
        let x = array![[0.0, 0.0, 0.0], [800.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let h = predictive_entropy(&p, x.view()).unwrap();
        assert!(h[1].abs() < 1e-300);
        assert!((h[0] - 3f64.ln()).abs() < 1e-12);
        assert_eq!(
            baseline_select(BaselineKind::Certain, 3, Some(&h), None, 1, 0).unwrap(),
            vec![1]
        );
        assert_eq!(
            baseline_select(BaselineKind::Uncertain, 3, Some(&h), None, 2, 0).unwrap(),
            vec![0, 2]
        );
    }

    #[test]
    fn full_budget_takes_everything() {
        let f = array![[0.0, 1.0], [1.0, 0.0], [5.0, 5.0]];
        let h = [0.3, 0.1, 0.2];
        for kind in [
            BaselineKind::Random,
            BaselineKind::Certain,
            BaselineKind::Uncertain,
            BaselineKind::PlainKmeans,
        ] {
            let mut p = baseline_select(kind, 3, Some(&h), Some(f.view()), 3, 9).unwrap();
            p.sort_unstable();
            assert_eq!(p, vec![0, 1, 2]);
        }
        assert!(baseline_select(BaselineKind::Random, 3, None, None, 4, 0).is_err());
    }

    #[test]
    fn euclidean_kmeans_separates_antipodes() {
        let f = array![[1.0, 0.0], [1.1, 0.0], [-1.0, 0.0], [-1.1, 0.0]];
        let mut picks = plain_kmeans(f.view(), 2, 3, 100).unwrap();
        picks.sort_unstable();
        assert!(picks[0] <= 1 && picks[1] >= 2);
    }
}
