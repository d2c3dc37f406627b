//! Per-sample gradient features used as clustering inputs.
//!
//! A feature is the concatenation of one block per sampled checkpoint, so the
//! inner product of two features sums the per-checkpoint gradient inner
//! products. RBC blocks hold the last-layer weight gradient (forward passes
//! only); GBC blocks hold importance-sampled whole-layer gradients.

mod dump;

pub use dump::{read_features, write_features};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::{BatchTrace, CheckpointStore, GradMode, NetworkParams};

/// Rows processed per forward/backward pass while building features.
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMethod {
    Rbc,
    Gbc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CheckpointSampling {
    /// `K` distinct epochs drawn uniformly from after the best epoch.
    #[default]
    Uniform,
    /// Epochs `t* + stride`, `t* + 2·stride`, ...
    Stride { stride: usize },
}

/// Picks `k` epochs from `(t*, T]` in increasing order.
pub fn sample_checkpoints<R: Rng + ?Sized>(
    store: &CheckpointStore,
    k: usize,
    mode: CheckpointSampling,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let best = store.best_epoch().ok_or(Error::Empty("checkpoint store"))?;
    let after: Vec<usize> = store.epochs().filter(|&e| e > best).collect();
    if k == 0 {
        return Err(invalid("need at least one checkpoint"));
    }
    let candidates = match mode {
        CheckpointSampling::Uniform => after,
        CheckpointSampling::Stride { stride } => {
            if stride == 0 {
                return Err(invalid("stride must be positive"));
            }
            after
                .into_iter()
                .filter(|e| (e - best) % stride == 0)
                .collect()
        }
    };
    if k > candidates.len() {
        return Err(invalid(format!(
            "{k} checkpoints requested but only {} are available after the best epoch {best}",
            candidates.len()
        )));
    }
    let mut picked: Vec<usize> = match mode {
        CheckpointSampling::Uniform => index::sample(rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect(),
        CheckpointSampling::Stride { .. } => candidates[..k].to_vec(),
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Gradient of the chosen loss part at the logits, one row per sample.
fn logit_deltas(
    trace: &BatchTrace,
    labels: Option<&[usize]>,
    mode: GradMode,
) -> Result<Array2<f64>> {
    let n = trace.len();
    let classes = trace.logits().ncols();
    if mode.needs_label() && labels.is_none() {
        return Err(Error::MissingLabel("feature"));
    }
    if let Some(labels) = labels {
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                context: "feature labels",
                expected: n,
                found: labels.len(),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
    }
    if !trace.logits().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("forward trace"));
    }
    let mut top = match mode {
        GradMode::LabelDependent => Array2::zeros((n, classes)),
        _ => trace.probabilities(),
    };
    if let Some(labels) = labels {
        for (j, &y) in labels.iter().enumerate() {
            match mode {
                GradMode::Full => top[[j, y]] -= 1.0,
                GradMode::LabelDependent => top[[j, y]] = 1.0,
                GradMode::LabelFree => {}
            }
        }
    }
    Ok(top)
}

fn outer_into(
    mut out: ndarray::ArrayViewMut1<f64>,
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    scale: f64,
) {
    let w = b.len();
    for (i, &ai) in a.iter().enumerate() {
        let f = scale * ai;
        for (o, &bj) in out.slice_mut(s![i * w..(i + 1) * w]).iter_mut().zip(b) {
            *o = f * bj;
        }
    }
}

/// RBC blocks `flatten(A_j · x̃_jᵀ)` for every row of `inputs`, where `A_j` is
/// the logit gradient (softmax alone in label-free mode) and `x̃_j` the input
/// of the last linear layer. Biases are not included.
pub fn rbc_block(
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    labels: Option<&[usize]>,
    mode: GradMode,
) -> Result<Array2<f64>> {
    let trace = BatchTrace::forward(params, inputs)?;
    let top = logit_deltas(&trace, labels, mode)?;
    let hidden = trace.activations.last().expect("at least one layer");
    let (c, h) = (top.ncols(), hidden.ncols());
    let mut out = Array2::zeros((trace.len(), c * h));
    for ((row, a), x) in out
        .rows_mut()
        .into_iter()
        .zip(top.rows())
        .zip(hidden.rows())
    {
        outer_into(row, a, x, 1.0);
    }
    Ok(out)
}

/// Single-sample RBC block.
pub fn rbc_feature(
    params: &NetworkParams,
    x: ArrayView1<f64>,
    label: Option<usize>,
    mode: GradMode,
) -> Result<Array1<f64>> {
    let labels = label.map(|y| vec![y]);
    let block = rbc_block(params, x.insert_axis(Axis(0)), labels.as_deref(), mode)?;
    Ok(block.row(0).to_owned())
}

/// Per-layer masses `A^(l) = ‖(1/N)·Σ_j ∇_l f_j‖²` (weights and bias) and their total.
pub fn layer_importance(
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    labels: Option<&[usize]>,
    mode: GradMode,
) -> Result<(Vec<f64>, f64)> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::Empty("importance sample set"));
    }
    let mut sum: Option<crate::nn::LayeredGradient> = None;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let trace = BatchTrace::with_deltas(
            params,
            inputs.slice(s![start..end, ..]),
            labels.map(|l| &l[start..end]),
            mode,
        )?;
        let g = trace.weighted_gradient(&vec![1.0 / n as f64; end - start]);
        match &mut sum {
            Some(acc) => acc.add_scaled(&g, 1.0),
            None => sum = Some(g),
        }
    }
    let sum = sum.expect("n > 0");
    let masses: Vec<f64> = sum.layers.iter().map(|l| l.norm_sq()).collect();
    let total: f64 = masses.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Degenerate(
            "every layer has zero mean gradient".into(),
        ));
    }
    Ok((masses, total))
}

/// Layer draws shared by every sample at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSamplingPlan {
    pub masses: Vec<f64>,
    pub total: f64,
    /// Drawn layer indices in draw order (with replacement).
    pub draws: Vec<usize>,
    /// `√(A / (R·A^(l)))` per draw, or 1 in raw mode.
    pub scales: Vec<f64>,
    pub raw: bool,
}

impl LayerSamplingPlan {
    /// Draws `r` layers with probability `A^(l)/A`.
    pub fn draw<R: Rng + ?Sized>(
        masses: Vec<f64>,
        r: usize,
        raw: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if r == 0 {
            return Err(invalid("need at least one layer draw"));
        }
        let total: f64 = masses.iter().sum();
        let dist = WeightedIndex::new(&masses)
            .map_err(|e| Error::Degenerate(format!("layer masses: {e}")))?;
        let draws: Vec<usize> = (0..r).map(|_| dist.sample(rng)).collect();
        let scales = draws
            .iter()
            .map(|&l| {
                if raw {
                    1.0
                } else {
                    (total / (r as f64 * masses[l])).sqrt()
                }
            })
            .collect();
        Ok(LayerSamplingPlan {
            masses,
            total,
            draws,
            scales,
            raw,
        })
    }

    /// One `(layer, scale)` block per distinct drawn layer, in first-draw order.
    ///
    /// A layer drawn `k` times is stored once with scale `√k` times the
    /// per-draw scale, which leaves every inner product unchanged.
    pub fn blocks(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for (&l, &sc) in self.draws.iter().zip(&self.scales) {
            match out.iter_mut().find(|b| b.0 == l) {
                Some(b) => b.2 += 1,
                None => out.push((l, sc, 1)),
            }
        }
        out.into_iter()
            .map(|(l, sc, k)| (l, sc * (k as f64).sqrt()))
            .collect()
    }

    pub fn block_dim(&self, params: &NetworkParams) -> usize {
        self.blocks()
            .iter()
            .map(|&(l, _)| params.layers()[l].param_count())
            .sum()
    }
}

/// GBC blocks for every row: each planned layer's gradient (weights then
/// bias), scaled per the plan.
pub fn gbc_block(
    params: &NetworkParams,
    plan: &LayerSamplingPlan,
    inputs: ArrayView2<f64>,
    labels: Option<&[usize]>,
    mode: GradMode,
) -> Result<Array2<f64>> {
    if plan.masses.len() != params.num_layers() {
        return Err(Error::DimensionMismatch {
            context: "layer sampling plan",
            expected: params.num_layers(),
            found: plan.masses.len(),
        });
    }
    let blocks = plan.blocks();
    let n = inputs.nrows();
    let mut out = Array2::zeros((n, plan.block_dim(params)));
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let trace = BatchTrace::with_deltas(
            params,
            inputs.slice(s![start..end, ..]),
            labels.map(|l| &l[start..end]),
            mode,
        )?;
        let mut offset = 0;
        for &(l, scale) in &blocks {
            let d = &trace.deltas[l];
            let a = &trace.activations[l];
            let wdim = d.ncols() * a.ncols();
            for (k, j) in (start..end).enumerate() {
                let mut row = out.row_mut(j);
                outer_into(
                    row.slice_mut(s![offset..offset + wdim]),
                    d.row(k),
                    a.row(k),
                    scale,
                );
                let mut bias = row.slice_mut(s![offset + wdim..offset + wdim + d.ncols()]);
                bias.assign(&d.row(k));
                bias *= scale;
            }
            offset += wdim + d.ncols();
        }
    }
    Ok(out)
}

/// Single-sample GBC block.
pub fn gbc_feature(
    params: &NetworkParams,
    plan: &LayerSamplingPlan,
    x: ArrayView1<f64>,
    label: Option<usize>,
    mode: GradMode,
) -> Result<Array1<f64>> {
    let labels = label.map(|y| vec![y]);
    let block = gbc_block(
        params,
        plan,
        x.insert_axis(Axis(0)),
        labels.as_deref(),
        mode,
    )?;
    Ok(block.row(0).to_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub method: FeatureMethod,
    pub mode: GradMode,
    pub raw: bool,
    pub checkpoints: Vec<usize>,
    pub block_dims: Vec<usize>,
    /// Layer draws per checkpoint (empty for RBC).
    pub plans: Vec<LayerSamplingPlan>,
}

impl FeatureLayout {
    pub fn dim(&self) -> usize {
        self.block_dims.iter().sum()
    }
}

/// Feature rows for a list of samples; row `k` belongs to dataset index `rows[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub rows: Vec<usize>,
    pub layout: FeatureLayout,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Position of each dataset index among the rows.
    pub fn position(&self, index: usize) -> Option<usize> {
        self.rows.iter().position(|&r| r == index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub method: FeatureMethod,
    pub mode: GradMode,
    /// Layer draws per checkpoint (GBC).
    pub draws: usize,
    /// Concatenate unscaled layer gradients (GBC).
    pub raw: bool,
}

impl FeatureSpec {
    pub fn rbc(mode: GradMode) -> Self {
        FeatureSpec {
            method: FeatureMethod::Rbc,
            mode,
            draws: 5,
            raw: false,
        }
    }

    pub fn gbc(mode: GradMode, draws: usize) -> Self {
        FeatureSpec {
            method: FeatureMethod::Gbc,
            mode,
            draws,
            raw: false,
        }
    }
}

/// Features of `indices` at the given checkpoints. Labels (when the mode
/// needs them) are `labels[k]` for `indices[k]`; GBC layer masses are
/// estimated on the same samples and one plan is drawn per checkpoint.
pub fn assemble_features<R: Rng + ?Sized>(
    ds: &Dataset,
    indices: &[usize],
    labels: Option<&[usize]>,
    store: &CheckpointStore,
    checkpoints: &[usize],
    spec: FeatureSpec,
    rng: &mut R,
) -> Result<FeatureMatrix> {
    build(
        ds,
        indices,
        labels,
        store,
        checkpoints,
        spec,
        |_, params, x, labels| {
            let (masses, _) = layer_importance(params, x, labels, spec.mode)?;
            LayerSamplingPlan::draw(masses, spec.draws, spec.raw, rng)
        },
    )
}

/// Features of `indices` under an existing layout (same checkpoints and, for
/// GBC, the same layer plans) in gradient mode `mode`.
pub fn features_for_layout(
    ds: &Dataset,
    indices: &[usize],
    labels: Option<&[usize]>,
    store: &CheckpointStore,
    layout: &FeatureLayout,
    mode: GradMode,
) -> Result<FeatureMatrix> {
    let spec = FeatureSpec {
        method: layout.method,
        mode,
        draws: layout.plans.first().map_or(1, |p| p.draws.len()),
        raw: layout.raw,
    };
    if layout.method == FeatureMethod::Gbc && layout.plans.len() != layout.checkpoints.len() {
        return Err(invalid("layout has no plan for some checkpoint"));
    }
    build(
        ds,
        indices,
        labels,
        store,
        &layout.checkpoints,
        spec,
        |k, _, _, _| Ok(layout.plans[k].clone()),
    )
}

fn build(
    ds: &Dataset,
    indices: &[usize],
    labels: Option<&[usize]>,
    store: &CheckpointStore,
    checkpoints: &[usize],
    spec: FeatureSpec,
    mut plan_for: impl FnMut(
        usize,
        &NetworkParams,
        ArrayView2<f64>,
        Option<&[usize]>,
    ) -> Result<LayerSamplingPlan>,
) -> Result<FeatureMatrix> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("checkpoint list"));
    }
    if spec.mode.needs_label() && labels.is_none() {
        return Err(Error::MissingLabel("feature"));
    }
    if let Some(l) = labels {
        if l.len() != indices.len() {
            return Err(Error::DimensionMismatch {
                context: "feature labels",
                expected: indices.len(),
                found: l.len(),
            });
        }
    }
    let labels = if spec.mode.needs_label() {
        labels
    } else {
        None
    };
    let x = ds.rows(indices);
    let mut blocks = Vec::with_capacity(checkpoints.len());
    let mut plans = Vec::new();
    for (k, &epoch) in checkpoints.iter().enumerate() {
        let params = store
            .get(epoch)
            .ok_or_else(|| invalid(format!("no checkpoint for epoch {epoch}")))?;
        let block = match spec.method {
            FeatureMethod::Rbc => rbc_block(params, x.view(), labels, spec.mode)?,
            FeatureMethod::Gbc => {
                let plan = plan_for(k, params, x.view(), labels)?;
                let b = gbc_block(params, &plan, x.view(), labels, spec.mode)?;
                plans.push(plan);
                b
            }
        };
        blocks.push(block);
    }
    let block_dims: Vec<usize> = blocks.iter().map(|b| b.ncols()).collect();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let data = ndarray::concatenate(Axis(1), &views)
        .map_err(|e| invalid(format!("feature layout: {e}")))?;
    drop(blocks);
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    Ok(FeatureMatrix {
        data,
        rows: indices.to_vec(),
        layout: FeatureLayout {
            method: spec.method,
            mode: spec.mode,
            raw: spec.raw,
            checkpoints: checkpoints.to_vec(),
            block_dims,
            plans,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{per_sample_gradient, Activation};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(sizes: &[usize], seed: u64) -> NetworkParams {
        NetworkParams::init(
            sizes,
            Activation::Tanh,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn store_with(epochs: &[(usize, f64)]) -> CheckpointStore {
        let p = net(&[2, 2], 0);
        let mut s = CheckpointStore::new();
        for &(e, acc) in epochs {
            s.checkpoint(e, &p, acc).unwrap();
        }
        s
    }

    #[test]
    fn checkpoint_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = store_with(&[(1, 0.2), (2, 0.9), (3, 0.5)]);
        assert_eq!(
            sample_checkpoints(&s, 1, CheckpointSampling::Uniform, &mut rng).unwrap(),
            vec![3]
        );
        assert!(sample_checkpoints(&s, 2, CheckpointSampling::Uniform, &mut rng).is_err());

        let epochs: Vec<(usize, f64)> = (1..=100)
            .map(|e| (e, if e == 10 { 1.0 } else { 0.1 }))
            .collect();
        let s = store_with(&epochs);
        let stride = CheckpointSampling::Stride { stride: 20 };
        assert_eq!(
            sample_checkpoints(&s, 4, stride, &mut rng).unwrap(),
            vec![30, 50, 70, 90]
        );
        assert!(sample_checkpoints(&s, 5, stride, &mut rng).is_err());
        let u = sample_checkpoints(&s, 7, CheckpointSampling::Uniform, &mut rng).unwrap();
        assert_eq!(u.len(), 7);
        assert!(u.windows(2).all(|w| w[0] < w[1]) && u[0] > 10);
    }

    #[test]
    fn rbc_matches_last_layer_gradient() {
        let p = net(&[3, 5, 4, 3], 7);
        let x = array![[0.2, -1.0, 0.7], [1.1, 0.3, -0.4]];
        let y = [2, 0];
        let block = rbc_block(&p, x.view(), Some(&y), GradMode::Full).unwrap();
        for j in 0..2 {
            let g = per_sample_gradient(&p, x.row(j), Some(y[j]), GradMode::Full).unwrap();
            let last = g.layers.last().unwrap();
            for (a, b) in block.row(j).iter().zip(last.weight.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rbc_label_free_minus_dependent_is_full() {
        let p = net(&[3, 4, 3], 2);
        let x = array![[0.2, -1.0, 0.7]];
        let full = rbc_feature(&p, x.row(0), Some(1), GradMode::Full).unwrap();
        let free = rbc_feature(&p, x.row(0), None, GradMode::LabelFree).unwrap();
        let dep = rbc_feature(&p, x.row(0), Some(1), GradMode::LabelDependent).unwrap();
        for k in 0..full.len() {
            assert!((full[k] - (free[k] - dep[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn rbc_zero_hidden_gives_zero_block() {
        // relu with strongly negative first-layer bias silences the hidden layer
        let mut p = NetworkParams::init(
            &[2, 3, 2],
            Activation::Relu,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        p.layers_mut()[0].bias.fill(-100.0);
        let b = rbc_feature(&p, array![0.1, 0.2].view(), Some(0), GradMode::Full).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn importance_matches_brute_force() {
        let p = net(&[2, 3, 2], 5);
        let x = array![[0.5, 1.0], [-1.0, 0.1], [0.3, -0.7]];
        let y = [0, 1, 1];
        let (masses, total) = layer_importance(&p, x.view(), Some(&y), GradMode::Full).unwrap();
        let grads: Vec<_> = (0..3)
            .map(|j| per_sample_gradient(&p, x.row(j), Some(y[j]), GradMode::Full).unwrap())
            .collect();
        for l in 0..2 {
            let w = grads.iter().fold(
                Array2::<f64>::zeros(grads[0].layers[l].weight.dim()),
                |acc, g| acc + &g.layers[l].weight,
            ) / 3.0;
            let b = grads.iter().fold(
                Array1::<f64>::zeros(grads[0].layers[l].bias.len()),
                |acc, g| acc + &g.layers[l].bias,
            ) / 3.0;
            let expect =
                w.iter().map(|v| v * v).sum::<f64>() + b.iter().map(|v| v * v).sum::<f64>();
            assert!((masses[l] - expect).abs() < 1e-12);
        }
        assert!((total - masses.iter().sum::<f64>()).abs() < 1e-15);

        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let y2 = [0, 1, 1, 0, 1, 1];
        let (m2, _) = layer_importance(&p, x2.view(), Some(&y2), GradMode::Full).unwrap();
        for (a, b) in masses.iter().zip(&m2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_layer_plan() {
        let p = net(&[3, 2], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = array![[0.2, 0.4, -0.1]];
        let (masses, _) = layer_importance(&p, x.view(), Some(&[1]), GradMode::Full).unwrap();
        let plan = LayerSamplingPlan::draw(masses, 1, false, &mut rng).unwrap();
        assert_eq!(plan.draws, vec![0]);
        assert!((plan.scales[0] - 1.0).abs() < 1e-15);
        let b = gbc_feature(&p, &plan, x.row(0), Some(1), GradMode::Full).unwrap();
        let g = per_sample_gradient(&p, x.row(0), Some(1), GradMode::Full).unwrap();
        for (a, e) in b.iter().zip(g.flatten()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn merged_duplicates_preserve_inner_products() {
        let p = net(&[2, 3, 3, 2], 9);
        let x = array![[0.5, 1.0], [-1.0, 0.1]];
        let plan = LayerSamplingPlan {
            masses: vec![1.0, 2.0, 3.0],
            total: 6.0,
            draws: vec![2, 0, 2, 2, 1],
            scales: [2, 0, 2, 2, 1]
                .iter()
                .map(|&l| (6.0f64 / (5.0 * [1.0, 2.0, 3.0][l])).sqrt())
                .collect(),
            raw: false,
        };
        let b = gbc_block(&p, &plan, x.view(), Some(&[0, 1]), GradMode::Full).unwrap();
        let got = b.row(0).dot(&b.row(1));
        let g0 = per_sample_gradient(&p, x.row(0), Some(0), GradMode::Full).unwrap();
        let g1 = per_sample_gradient(&p, x.row(1), Some(1), GradMode::Full).unwrap();
        let expect: f64 = plan
            .draws
            .iter()
            .zip(&plan.scales)
            .map(|(&l, s)| s * s * g0.layers[l].dot(&g1.layers[l]))
            .sum();
        assert!((got - expect).abs() < 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn assembled_rbc_inner_product_sums_checkpoints() {
        let mut store = CheckpointStore::new();
        let nets: Vec<NetworkParams> = (0..4).map(|s| net(&[2, 3, 3], s)).collect();
        for (e, p) in nets.iter().enumerate() {
            store
                .checkpoint(e + 1, p, if e == 0 { 1.0 } else { 0.0 })
                .unwrap();
        }
        let ds = Dataset::new(
            array![[0.1, 0.2], [1.0, -1.0], [0.0, 0.5]],
            vec![0, 2, 1],
            3,
        )
        .unwrap();
        let idx = [0, 1, 2];
        let labels = ds.observed(&idx);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = assemble_features(
            &ds,
            &idx,
            Some(&labels),
            &store,
            &[2, 4],
            FeatureSpec::rbc(GradMode::Full),
            &mut rng,
        )
        .unwrap();
        assert_eq!(f.layout.block_dims, vec![9, 9]);
        let expect: f64 = [2usize, 4]
            .iter()
            .map(|&e| {
                let p = &nets[e - 1];
                let a =
                    per_sample_gradient(p, ds.features.row(0), Some(0), GradMode::Full).unwrap();
                let b =
                    per_sample_gradient(p, ds.features.row(1), Some(2), GradMode::Full).unwrap();
                a.layers[1].weight_dot(&b.layers[1])
            })
            .sum();
        assert!((f.data.row(0).dot(&f.data.row(1)) - expect).abs() < 1e-10);
    }

    #[test]
    fn layout_replay_matches_and_switches_mode() {
        let mut store = CheckpointStore::new();
        for e in 1..=3 {
            store
                .checkpoint(e, &net(&[2, 4, 3, 3], e as u64), 0.0)
                .unwrap();
        }
        let ds = Dataset::new(
            array![[0.3, -0.2], [1.0, 0.4], [-0.7, 0.9], [0.2, 0.2]],
            vec![0, 2, 1, 1],
            3,
        )
        .unwrap();
        let idx = [0, 1, 2, 3];
        let labels = ds.observed(&idx);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = FeatureSpec::gbc(GradMode::LabelFree, 3);
        let f =
            assemble_features(&ds, &idx, Some(&labels), &store, &[1, 3], spec, &mut rng).unwrap();
        let again = features_for_layout(
            &ds,
            &idx[1..3],
            None,
            &store,
            &f.layout,
            GradMode::LabelFree,
        )
        .unwrap();
        assert_eq!(again.data, f.data.slice(s![1..3, ..]));
        assert_eq!(again.layout, f.layout);

        let full = features_for_layout(&ds, &idx, Some(&labels), &store, &f.layout, GradMode::Full)
            .unwrap();
        let dep = features_for_layout(
            &ds,
            &idx,
            Some(&labels),
            &store,
            &f.layout,
            GradMode::LabelDependent,
        )
        .unwrap();
        for ((a, b), c) in full.data.iter().zip(&f.data).zip(&dep.data) {
            assert!((a - (b - c)).abs() < 1e-12);
        }
        assert_eq!(full.layout.plans, f.layout.plans);
    }
}
