//! Objective values, bound checks and weight-quality diagnostics.

mod report;

pub use report::{
    format_d_table, format_method_table, hash_bytes, hash_file, summarize, write_long_format,
    LongRecord, ManifestEntry, RunManifest, Summary,
};

use ndarray::{Array1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::kmeans_assign;
use crate::data::{Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::nn::{self, BatchTrace, NetworkParams};

fn check_layout(
    features: ArrayView2<f64>,
    other: ArrayView2<f64>,
    context: &'static str,
) -> Result<()> {
    if features.ncols() != other.ncols() {
        return Err(Error::DimensionMismatch {
            context,
            expected: features.ncols(),
            found: other.ncols(),
        });
    }
    Ok(())
}

/// `Σ_j |Σ_i ⟨G_j, G_meta,i⟩|`.
pub fn msso_value(features: ArrayView2<f64>, meta: ArrayView2<f64>) -> Result<f64> {
    check_layout(features, meta, "meta features")?;
    let total: Array1<f64> = meta.sum_axis(ndarray::Axis(0));
    Ok(features.dot(&total).iter().map(|v| v.abs()).sum())
}

/// `Σ_j Σ_i |⟨G_j, C_i⟩|`.
pub fn mco_value(features: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Result<f64> {
    check_layout(features, centroids, "centroids")?;
    Ok(features.dot(&centroids.t()).iter().map(|v| v.abs()).sum())
}

/// The same objective written as `Σ_j ‖G_j‖ Σ_i ‖C_i‖ |cos(G_j, C_i)|`.
pub fn mco_value_weighted(features: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Result<f64> {
    check_layout(features, centroids, "centroids")?;
    let c_norms: Vec<f64> = centroids
        .rows()
        .into_iter()
        .map(|c| c.dot(&c).sqrt())
        .collect();
    let mut total = 0.0;
    for g in features.rows() {
        let gn = g.dot(&g).sqrt();
        if gn == 0.0 {
            continue;
        }
        let inner: f64 = centroids
            .rows()
            .into_iter()
            .zip(&c_norms)
            .filter(|(_, &cn)| cn > 0.0)
            .map(|(c, &cn)| cn * (g.dot(&c) / (gn * cn)).abs())
            .sum();
        total += gn * inner;
    }
    Ok(total)
}

/// Dominance ratio of one row of inner products: same-sign mass over
/// opposite-sign mass, infinite when one side is empty.
pub fn dominance_ratio(products: impl IntoIterator<Item = f64>) -> f64 {
    let (mut p, mut q) = (0.0, 0.0);
    for v in products {
        if v > 0.0 {
            p += v;
        } else {
            q -= v;
        }
    }
    let (hi, lo) = if p >= q { (p, q) } else { (q, p) };
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DStatistics {
    /// Smallest finite value (NaN when every value is infinite).
    pub min: f64,
    /// Nearest-rank 5% quantile of the finite values.
    pub quantile_5: f64,
    pub infinite: usize,
    pub count: usize,
}

impl DStatistics {
    pub fn from_values(d: &[f64]) -> Self {
        let mut finite: Vec<f64> = d.iter().copied().filter(|v| v.is_finite()).collect();
        finite.sort_by(f64::total_cmp);
        let (min, quantile_5) = if finite.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let rank = ((0.05 * finite.len() as f64).ceil() as usize).max(1);
            (finite[0], finite[rank - 1])
        };
        DStatistics {
            min,
            quantile_5,
            infinite: d.len() - finite.len(),
            count: d.len(),
        }
    }
}

/// Per-sample `D_j` against `centroids` plus summary statistics.
pub fn d_statistics(
    features: ArrayView2<f64>,
    centroids: ArrayView2<f64>,
) -> Result<(Vec<f64>, DStatistics)> {
    check_layout(features, centroids, "centroids")?;
    let products = features.dot(&centroids.t());
    let d: Vec<f64> = products
        .rows()
        .into_iter()
        .map(|r| dominance_ratio(r.iter().copied()))
        .collect();
    let stats = DStatistics::from_values(&d);
    Ok((d, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub msso: f64,
    pub mco: f64,
    pub ratio: f64,
    pub d: Vec<f64>,
    pub d_stats: DStatistics,
}

pub fn objective_report(
    features: ArrayView2<f64>,
    centroids: ArrayView2<f64>,
) -> Result<ObjectiveReport> {
    let msso = msso_value(features, centroids)?;
    let mco = mco_value(features, centroids)?;
    let (d, d_stats) = d_statistics(features, centroids)?;
    Ok(ObjectiveReport {
        msso,
        mco,
        ratio: if mco > 0.0 { msso / mco } else { f64::NAN },
        d,
        d_stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// `min_j D_j` over all samples (may be infinite).
    pub d: f64,
    /// `(D-1)/(D+1)`, 1 for infinite `D`.
    pub lower: f64,
    pub ratio: f64,
    /// Every sample has `D_j > 1`.
    pub assumption_holds: bool,
    pub holds: bool,
}

const BOUND_TOL: f64 = 1e-12;

/// Checks `(D-1)/(D+1) ≤ MSSO/MCO ≤ 1` with `D = min_j D_j`, the centroids
/// standing in for the meta features.
pub fn verify_bound(features: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Result<BoundCheck> {
    let report = objective_report(features, centroids)?;
    if report.mco == 0.0 {
        return Err(Error::Degenerate("MCO is zero".into()));
    }
    let d = report.d.iter().copied().fold(f64::INFINITY, f64::min);
    let lower = if d.is_finite() {
        (d - 1.0) / (d + 1.0)
    } else {
        1.0
    };
    Ok(BoundCheck {
        d,
        lower,
        ratio: report.ratio,
        assumption_holds: d > 1.0,
        holds: report.ratio >= lower - BOUND_TOL && report.ratio <= 1.0 + BOUND_TOL,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableSamples {
    pub count: usize,
    pub stable: Vec<bool>,
    /// Label-free nearest centroid.
    pub assigned: Vec<usize>,
    /// Label-free `|⟨G̃_j, C_a(j)⟩|`.
    pub alpha: Vec<f64>,
    /// Label-free max over the other centroids.
    pub beta: Vec<f64>,
    /// Min and max over centroids of `|⟨G_j, C_i⟩| / |⟨G̃_j, C_i⟩|` (NaN when undefined).
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Compares nearest centroids under label-free and label-aware similarity.
pub fn stable_sample_count(
    label_free: ArrayView2<f64>,
    full: ArrayView2<f64>,
    centroids: ArrayView2<f64>,
) -> Result<StableSamples> {
    if label_free.dim() != full.dim() {
        return Err(Error::DimensionMismatch {
            context: "label-aware features",
            expected: label_free.nrows(),
            found: full.nrows(),
        });
    }
    check_layout(label_free, centroids, "centroids")?;
    let assigned = kmeans_assign(label_free, centroids)?;
    let aware = kmeans_assign(full, centroids)?;
    let pf = label_free.dot(&centroids.t());
    let pa = full.dot(&centroids.t());
    let n = label_free.nrows();
    let mut out = StableSamples {
        count: 0,
        stable: Vec::with_capacity(n),
        assigned: assigned.clone(),
        alpha: Vec::with_capacity(n),
        beta: Vec::with_capacity(n),
        lower: Vec::with_capacity(n),
        upper: Vec::with_capacity(n),
    };
    for j in 0..n {
        let a = assigned[j];
        out.stable.push(a == aware[j]);
        out.alpha.push(pf[[j, a]].abs());
        let beta = (0..centroids.nrows())
            .filter(|&i| i != a)
            .map(|i| pf[[j, i]].abs())
            .fold(f64::NEG_INFINITY, f64::max);
        out.beta.push(beta);
        let ratios: Vec<f64> = (0..centroids.nrows())
            .filter(|&i| pf[[j, i]] != 0.0)
            .map(|i| pa[[j, i]].abs() / pf[[j, i]].abs())
            .collect();
        out.lower
            .push(ratios.iter().copied().reduce(f64::min).unwrap_or(f64::NAN));
        out.upper
            .push(ratios.iter().copied().reduce(f64::max).unwrap_or(f64::NAN));
    }
    out.count = out.stable.iter().filter(|&&s| s).count();
    Ok(out)
}

/// Probability that a random clean sample outweighs a random noisy one, ties ½.
pub fn auc_weights_vs_clean(weights: &[f64], clean: &[bool]) -> Result<f64> {
    if weights.len() != clean.len() {
        return Err(Error::DimensionMismatch {
            context: "clean flags",
            expected: weights.len(),
            found: clean.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("sample weights"));
    }
    let n_pos = clean.iter().filter(|&&c| c).count();
    let n_neg = clean.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid("AUC needs both clean and noisy samples"));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]));
    // mid-ranks, 1-based
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && weights[order[end]] == weights[order[start]] {
            end += 1;
        }
        let mid = (start + end + 1) as f64 / 2.0;
        rank_sum += mid * order[start..end].iter().filter(|&&i| clean[i]).count() as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// First-order distance to the decision boundary:
/// `(z_top1 - z_top2) / ‖∇_x (z_top1 - z_top2)‖`.
pub fn first_order_margin(params: &NetworkParams, x: ndarray::ArrayView1<f64>) -> Result<f64> {
    let z = params.logits(x)?;
    if z.len() < 2 {
        return Err(invalid("margins need at least two classes"));
    }
    let mut top = (0, 1);
    if z[1] > z[0] {
        top = (1, 0);
    }
    for c in 2..z.len() {
        if z[c] > z[top.0] {
            top = (c, top.0);
        } else if z[c] > z[top.1] {
            top.1 = c;
        }
    }
    let gap = z[top.0] - z[top.1];
    if gap == 0.0 {
        return Ok(0.0);
    }
    let mut direction = Array1::zeros(z.len());
    direction[top.0] = 1.0;
    direction[top.1] = -1.0;
    let g = nn::input_gradient(params, x, &direction)?;
    let norm = g.dot(&g).sqrt();
    Ok(if norm > 0.0 {
        gap / norm
    } else {
        f64::INFINITY
    })
}

/// The `k` entries of `indices` with the smallest first-order margin
/// (ties by position), returned in that order.
pub fn boundary_subset(
    params: &NetworkParams,
    ds: &Dataset,
    indices: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    if k > indices.len() {
        return Err(invalid(format!(
            "boundary subset of {k} from {} samples",
            indices.len()
        )));
    }
    let margins = indices
        .par_iter()
        .map(|&i| first_order_margin(params, ds.features.row(i)))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..indices.len()).collect();
    order.sort_by(|&a, &b| margins[a].total_cmp(&margins[b]).then(a.cmp(&b)));
    Ok(order[..k].iter().map(|&p| indices[p]).collect())
}

/// Accuracy against clean labels on one split.
pub fn evaluate_accuracy(params: &NetworkParams, ds: &Dataset, split: Split) -> Result<f64> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    nn::accuracy(params, ds.rows(&idx).view(), &ds.clean(&idx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightQualityReport {
    pub auc_all: f64,
    pub auc_boundary: f64,
    pub subset: String,
}

/// AUC of `weights` (aligned with `pool`) over the whole pool and over the
/// `boundary_k` pool samples nearest the boundary of `params`. The subset AUC
/// is NaN when it holds a single class.
pub fn weight_quality(
    params: &NetworkParams,
    ds: &Dataset,
    pool: &[usize],
    weights: &[f64],
    boundary_k: usize,
) -> Result<WeightQualityReport> {
    let flags = ds.clean_flags();
    let clean: Vec<bool> = pool.iter().map(|&i| flags[i]).collect();
    let auc_all = auc_weights_vs_clean(weights, &clean)?;
    let k = boundary_k.min(pool.len());
    let subset = boundary_subset(params, ds, pool, k)?;
    let pos: std::collections::HashMap<usize, usize> =
        pool.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let sw: Vec<f64> = subset.iter().map(|i| weights[pos[i]]).collect();
    let sc: Vec<bool> = subset.iter().map(|i| clean[pos[i]]).collect();
    Ok(WeightQualityReport {
        auc_all,
        auc_boundary: auc_weights_vs_clean(&sw, &sc).unwrap_or(f64::NAN),
        subset: format!("{k} smallest first-order input-space margins"),
    })
}

/// Mean softmax probability of the observed label, a cheap sanity signal.
pub fn mean_observed_confidence(
    params: &NetworkParams,
    ds: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Empty("confidence set"));
    }
    let probs = BatchTrace::forward(params, ds.rows(indices).view())?.probabilities();
    let labels = ds.observed(indices);
    Ok(labels
        .iter()
        .enumerate()
        .map(|(r, &y)| probs[[r, y]])
        .sum::<f64>()
        / indices.len() as f64)
}
