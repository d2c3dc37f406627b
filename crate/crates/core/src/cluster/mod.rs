//! Weighted K-means over gradient features and the meta-sample selection
//! built on it.
//!
//! Similarity of a feature `G` to a centroid `C` is `‖C‖·|cos(G, C)|`, so
//! antipodal features are equally close. Centroids are the sum of their
//! members divided by the members' total norm.

mod baseline;
mod pipeline;

pub use baseline::{baseline_select, plain_kmeans, predictive_entropy, BaselineKind};
pub use pipeline::{
    candidate_and_meta_features, featurisation_epochs, pick_from_features, read_selection,
    round_seed, run_selection_pipeline, select_after_warmup, selected_indices, selection_records,
    write_selection, write_selection_records, Clusterer, RoundPicks, SelectionConfig,
    SelectionOutcome, SelectionRecord, SelectionRound,
};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default iteration cap of the clustering loop.
pub const MAX_ITERS: usize = 200;

/// `‖C‖·|cos(G, C)| = |⟨G, C⟩| / ‖G‖`; zero for a zero-norm `G`.
pub fn weighted_similarity(g: ArrayView1<f64>, c: ArrayView1<f64>) -> Result<f64> {
    if g.len() != c.len() {
        return Err(Error::DimensionMismatch {
            context: "similarity",
            expected: c.len(),
            found: g.len(),
        });
    }
    if c.dot(&c) == 0.0 {
        return Err(invalid("similarity to a zero centroid"));
    }
    let gn = g.dot(&g).sqrt();
    if gn == 0.0 {
        return Ok(0.0);
    }
    Ok(g.dot(&c).abs() / gn)
}

fn row_norms(features: ArrayView2<f64>) -> Array1<f64> {
    features
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect()
}

/// Similarities of every row to every centroid (`N × M`); zero rows score 0.
fn similarity_matrix(
    features: ArrayView2<f64>,
    norms: &Array1<f64>,
    centroids: ArrayView2<f64>,
) -> Array2<f64> {
    let mut sims = features.dot(&centroids.t());
    for (mut row, &n) in sims.rows_mut().into_iter().zip(norms) {
        if n == 0.0 {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| v.abs() / n);
        }
    }
    sims
}

fn argmax_rows(sims: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    sims.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            (best, row[best])
        })
        .unzip()
}

/// Assigns each feature to the centroid of highest similarity (lowest index on ties).
pub fn kmeans_assign(features: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Result<Vec<usize>> {
    check_centroids(features, centroids)?;
    let norms = row_norms(features);
    Ok(argmax_rows(&similarity_matrix(features, &norms, centroids)).0)
}

fn check_centroids(features: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Result<()> {
    if centroids.nrows() == 0 {
        return Err(invalid("need at least one centroid"));
    }
    if centroids.ncols() != features.ncols() {
        return Err(Error::DimensionMismatch {
            context: "centroids",
            expected: features.ncols(),
            found: centroids.ncols(),
        });
    }
    Ok(())
}

/// Centroids `Σ G_j / Σ ‖G_j‖` over nonzero members, and for each cluster
/// whether it had no such member (those rows are left at zero).
fn update_inner(
    features: ArrayView2<f64>,
    norms: &Array1<f64>,
    assignment: &[usize],
    m: usize,
) -> (Array2<f64>, Vec<bool>) {
    let mut sums = Array2::zeros((m, features.ncols()));
    let mut mass = vec![0.0; m];
    for ((row, &a), &n) in features.rows().into_iter().zip(assignment).zip(norms) {
        if n > 0.0 {
            sums.row_mut(a).scaled_add(1.0, &row);
            mass[a] += n;
        }
    }
    let mut empty = vec![false; m];
    for (i, mut c) in sums.rows_mut().into_iter().enumerate() {
        if mass[i] > 0.0 {
            c /= mass[i];
        } else {
            empty[i] = true;
        }
    }
    (sums, empty)
}

/// Update step for `m` clusters; `empty[i]` flags clusters without members.
pub fn kmeans_update(
    features: ArrayView2<f64>,
    assignment: &[usize],
    m: usize,
) -> Result<(Array2<f64>, Vec<bool>)> {
    if assignment.len() != features.nrows() {
        return Err(Error::DimensionMismatch {
            context: "assignment",
            expected: features.nrows(),
            found: assignment.len(),
        });
    }
    if let Some(&a) = assignment.iter().find(|&&a| a >= m) {
        return Err(invalid(format!("assignment to cluster {a} of {m}")));
    }
    let norms = row_norms(features);
    let (centroids, empty) = update_inner(features, &norms, assignment, m);
    let mut has_member = vec![false; m];
    for &a in assignment {
        has_member[a] = true;
    }
    if let Some(i) = (0..m).find(|&i| empty[i] && has_member[i]) {
        return Err(Error::Degenerate(format!(
            "cluster {i} has only zero-norm members"
        )));
    }
    Ok((centroids, empty))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Array2<f64>,
    pub assignment: Vec<usize>,
    /// Similarity of each feature to its assigned centroid.
    pub similarity: Vec<f64>,
    pub iterations: usize,
    /// `Σ_j |⟨G_j, C_a(j)⟩|` at the final centroids.
    pub objective: f64,
    /// Objective after every assignment step.
    pub trace: Vec<f64>,
    /// Change of `Σ_j |⟨G_j, C_a(j)⟩| / ‖G_j‖` made by each reassignment
    /// under fixed centroids (from the second assignment step on).
    pub assignment_gains: Vec<f64>,
    /// Clusters that lost every member during the run.
    pub empty: Vec<bool>,
}

impl ClusterModel {
    pub fn len(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.nrows() == 0
    }

    pub fn empty_count(&self) -> usize {
        self.empty.iter().filter(|&&e| e).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iters: MAX_ITERS,
            tol: 0.0,
        }
    }
}

fn objective(sims: &[f64], norms: &Array1<f64>) -> f64 {
    sims.iter().zip(norms).map(|(s, n)| s * n).sum()
}

/// Weighted K-means from `m` distinct nonzero features drawn with `seed`
/// (normalised to unit length).
///
/// Stops on an unchanged assignment, an objective change below `tol`, or
/// after `max_iters` iterations. Zero-norm features sit in cluster 0 with
/// similarity 0 and never contribute to a centroid. A cluster that loses all
/// members is flagged in `empty` and keeps its previous centroid.
pub fn weighted_kmeans(
    features: ArrayView2<f64>,
    m: usize,
    seed: u64,
    config: KMeansConfig,
) -> Result<ClusterModel> {
    if !features.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("clustering features"));
    }
    if m == 0 {
        return Err(invalid("need at least one cluster"));
    }
    let norms = row_norms(features);
    let nonzero: Vec<usize> = (0..features.nrows()).filter(|&j| norms[j] > 0.0).collect();
    if m > nonzero.len() {
        return Err(invalid(format!(
            "{m} clusters requested but only {} nonzero features",
            nonzero.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::zeros((m, features.ncols()));
    for (i, k) in index::sample(&mut rng, nonzero.len(), m)
        .into_iter()
        .enumerate()
    {
        let j = nonzero[k];
        centroids.row_mut(i).assign(&(&features.row(j) / norms[j]));
    }

    let mut assignment: Vec<usize> = Vec::new();
    let mut sims = Vec::new();
    let mut trace = Vec::new();
    let mut gains = Vec::new();
    let mut empty = vec![false; m];
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let matrix = similarity_matrix(features, &norms, centroids.view());
        let (next, next_sims) = argmax_rows(&matrix);
        if !assignment.is_empty() {
            let before: f64 = assignment
                .iter()
                .enumerate()
                .map(|(j, &a)| matrix[[j, a]])
                .sum();
            gains.push(next_sims.iter().sum::<f64>() - before);
        }
        let obj = objective(&next_sims, &norms);
        let unchanged = next == assignment;
        let small_step = trace
            .last()
            .is_some_and(|&prev: &f64| (obj - prev).abs() < config.tol);
        assignment = next;
        sims = next_sims;
        trace.push(obj);
        // the returned centroids are the ones that produced the assignment
        if unchanged || small_step || iterations == config.max_iters {
            break;
        }
        let (updated, now_empty) = update_inner(features, &norms, &assignment, m);
        for i in 0..m {
            if now_empty[i] {
                empty[i] = true;
            } else {
                centroids.row_mut(i).assign(&updated.row(i));
            }
        }
    }
    // the final assignment may have refilled a cluster emptied earlier
    let mut has_member = vec![false; m];
    for (&a, &n) in assignment.iter().zip(&norms) {
        if n > 0.0 {
            has_member[a] = true;
        }
    }
    let empty: Vec<bool> = (0..m).map(|i| !has_member[i]).collect();
    let objective = objective(&sims, &norms);
    Ok(ClusterModel {
        centroids,
        assignment,
        similarity: sims,
        iterations,
        objective,
        trace,
        assignment_gains: gains,
        empty,
    })
}

/// Reruns weighted K-means with `M − M_empty` clusters until no cluster is empty.
pub fn kmeans_with_restart(
    features: ArrayView2<f64>,
    m: usize,
    seed: u64,
    config: KMeansConfig,
) -> Result<ClusterModel> {
    let mut m = m;
    let mut round = 0u64;
    loop {
        if m == 0 {
            return Err(Error::Degenerate("every cluster ended empty".into()));
        }
        let model = weighted_kmeans(features, m, seed.wrapping_add(round), config)?;
        let gone = model.empty_count();
        if gone == 0 {
            return Ok(model);
        }
        m -= gone;
        round += 1;
    }
}

/// Per cluster, the member most similar to its centroid (lowest row on ties).
/// Returns `(row, cluster, similarity)` in cluster order; empty clusters are skipped.
pub fn extract_meta_samples(
    model: &ClusterModel,
    features: ArrayView2<f64>,
) -> Vec<(usize, usize, f64)> {
    let norms = row_norms(features);
    let mut best: Vec<Option<(usize, f64)>> = vec![None; model.len()];
    for (j, (&a, &s)) in model.assignment.iter().zip(&model.similarity).enumerate() {
        if norms[j] == 0.0 {
            continue;
        }
        match best[a] {
            Some((_, bs)) if bs >= s => {}
            _ => best[a] = Some((j, s)),
        }
    }
    best.into_iter()
        .enumerate()
        .filter_map(|(i, b)| b.map(|(j, s)| (j, i, s)))
        .collect()
}

/// Keeps the `ceil(keep_fraction · n)` candidates least similar to any
/// existing meta feature (score = max similarity, zero meta features ignored).
/// Returns surviving rows in increasing order.
pub fn prune_near_existing(
    candidates: ArrayView2<f64>,
    meta: ArrayView2<f64>,
    keep_fraction: f64,
) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(invalid(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let n = candidates.nrows();
    if n == 0 {
        return Err(Error::Empty("candidate set"));
    }
    let keep = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    let meta_norms = row_norms(meta);
    let live: Vec<usize> = (0..meta.nrows()).filter(|&i| meta_norms[i] > 0.0).collect();
    if keep == n || live.is_empty() {
        return Ok((0..keep).collect());
    }
    let meta = meta.select(Axis(0), &live);
    let sims = similarity_matrix(candidates, &row_norms(candidates), meta.view());
    let scores: Vec<f64> = sims
        .rows()
        .into_iter()
        .map(|r| r.fold(0.0, |a: f64, &b| a.max(b)))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}
