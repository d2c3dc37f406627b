//! Bi-level meta re-weighting.
//!
//! Each mini-batch step takes a virtual SGD step with the current sample
//! weights, measures how the meta loss at the virtual parameters responds to
//! each sample's weight (a gradient inner product), updates the weights and
//! finally takes the real weighted step.

mod io;

pub use io::{load_artifacts, save_artifacts, write_metrics, write_weight_trajectory};

use ndarray::{ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::nn::{
    accuracy, Activation, BatchTrace, CheckpointStore, GradMode, NetworkParams, Sgd, SgdConfig,
};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// Weights persist across steps and are clamped to `[0, 1]`.
    #[default]
    Shu,
    /// Weights are recomputed per batch from a zero perturbation and normalised.
    Ren,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Weight-update learning rate.
    pub weight_lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub weight_rule: WeightRule,
    #[serde(default = "default_weight_init")]
    pub weight_init: f64,
    #[serde(default)]
    pub seed: u64,
    /// Epochs after which the learning rate is multiplied by `lr_gamma`.
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub lr_gamma: f64,
}

fn default_weight_init() -> f64 {
    0.5
}

fn default_gamma() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            weight_lr: 1.0,
            momentum: 0.8,
            weight_decay: 0.0,
            batch_size: 128,
            epochs: 20,
            weight_rule: WeightRule::Shu,
            weight_init: default_weight_init(),
            seed: 0,
            lr_milestones: Vec::new(),
            lr_gamma: default_gamma(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        if !(self.weight_lr >= 0.0 && self.weight_lr.is_finite()) {
            return Err(invalid(format!(
                "weight_lr must be non-negative, got {}",
                self.weight_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.weight_init) {
            return Err(invalid(format!(
                "weight_init must lie in [0, 1], got {}",
                self.weight_init
            )));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return Err(invalid("lr_gamma must be positive"));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate in force during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| m < epoch).count();
        self.lr * self.lr_gamma.powi(passed as i32)
    }
}

/// Hidden layer widths and activation; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Architecture {
    pub fn sizes(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(&self.hidden);
        sizes.push(classes);
        sizes
    }

    pub fn init(&self, ds: &Dataset, seed: u64) -> Result<NetworkParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkParams::init(
            &self.sizes(ds.dim(), ds.class_count),
            self.activation,
            &mut rng,
        )
    }
}

/// One weight per re-weighted training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub w: Vec<f64>,
}

impl WeightVector {
    pub fn filled(n: usize, value: f64) -> Self {
        WeightVector { w: vec![value; n] }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn in_unit_interval(&self) -> bool {
        self.w.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub params: NetworkParams,
    pub checkpoints: CheckpointStore,
    /// Dataset indices carrying a weight, in weight-vector order.
    pub pool: Vec<usize>,
    /// Dataset indices used as meta samples.
    pub meta: Vec<usize>,
    /// Weights at the end of every epoch.
    pub trajectory: Vec<WeightVector>,
    pub metrics: Vec<EpochMetrics>,
}

impl RunArtifacts {
    pub fn final_weights(&self) -> &WeightVector {
        self.trajectory
            .last()
            .expect("runs have at least one epoch")
    }

    pub fn final_metrics(&self) -> EpochMetrics {
        *self.metrics.last().expect("runs have at least one epoch")
    }

    /// Metrics of the epoch with the best validation accuracy.
    pub fn best_metrics(&self) -> EpochMetrics {
        let best = self
            .checkpoints
            .best_epoch()
            .expect("runs have at least one epoch");
        self.metrics[best - 1]
    }
}

/// Batch labels and gradients at the current parameters; shared by the
/// virtual update, the weight gradient and the real step.
pub fn batch_trace(
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    labels: &[usize],
) -> Result<BatchTrace> {
    BatchTrace::with_deltas(params, inputs, Some(labels), GradMode::Full)
}

/// `Θ̂ = Θ − (α/n)·Σ_j w_j ∇f_j(Θ)`.
pub fn virtual_update(
    params: &NetworkParams,
    batch: &BatchTrace,
    weights: &[f64],
    alpha: f64,
) -> Result<NetworkParams> {
    check_weights(batch, weights)?;
    let grad = batch.weighted_gradient(weights);
    if !grad.is_finite() {
        return Err(Error::NonFinite("batch gradient"));
    }
    let mut out = params.clone();
    out.add_scaled(&grad, -alpha / batch.len() as f64);
    Ok(out)
}

/// Additive weight updates `Δ_j = ηα/(nM)·Σ_i ⟨∇f_meta,i(Θ̂), ∇f_j(Θ)⟩`.
pub fn meta_weight_gradient(
    virtual_params: &NetworkParams,
    meta_inputs: ArrayView2<f64>,
    meta_labels: &[usize],
    batch: &BatchTrace,
    alpha: f64,
    eta: f64,
) -> Result<Vec<f64>> {
    let m = meta_labels.len();
    if m == 0 {
        return Err(Error::Empty("meta set"));
    }
    let meta = batch_trace(virtual_params, meta_inputs, meta_labels)?;
    let meta_sum = meta.weighted_gradient(&vec![1.0; m]);
    if !meta_sum.is_finite() {
        return Err(Error::NonFinite("meta gradient"));
    }
    let scale = eta * alpha / (batch.len() * m) as f64;
    Ok(batch
        .dots_with(&meta_sum)
        .into_iter()
        .map(|d| scale * d)
        .collect())
}

/// `w ← clamp(w + Δ, 0, 1)`.
pub fn apply_weight_update_shu(weights: &mut [f64], delta: &[f64]) {
    for (w, d) in weights.iter_mut().zip(delta) {
        *w = (*w + d).clamp(0.0, 1.0);
    }
}

/// `w̃ = max(Δ, 0)` normalised over the batch; uniform when every entry clips.
pub fn apply_weight_update_ren(delta: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = delta.iter().map(|d| d.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total > 0.0 {
        clipped.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / delta.len() as f64; delta.len()]
    }
}

/// Momentum-SGD step on `(1/n)·Σ_j w_j ∇f_j(Θ)`.
pub fn weighted_step(
    params: &mut NetworkParams,
    batch: &BatchTrace,
    weights: &[f64],
    optimizer: &mut Sgd,
) -> Result<()> {
    check_weights(batch, weights)?;
    let mut grad = batch.weighted_gradient(weights);
    grad.scale(1.0 / batch.len() as f64);
    optimizer.step(params, &grad)
}

fn check_weights(batch: &BatchTrace, weights: &[f64]) -> Result<()> {
    if weights.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            context: "batch weights",
            expected: batch.len(),
            found: weights.len(),
        });
    }
    Ok(())
}

/// Accuracy of `params` against clean labels on every split.
pub fn evaluate(
    params: &NetworkParams,
    ds: &Dataset,
    epoch: usize,
    pool: &[usize],
) -> Result<EpochMetrics> {
    let score = |idx: &[usize]| {
        accuracy(
            params,
            ds.features.select(Axis(0), idx).view(),
            &ds.clean(idx),
        )
    };
    Ok(EpochMetrics {
        epoch,
        train: score(pool)?,
        validation: score(&ds.indices(Split::Validation))?,
        test: score(&ds.indices(Split::Test))?,
    })
}

fn check_meta(ds: &Dataset, meta: &[usize]) -> Result<()> {
    let mut seen = vec![false; ds.len()];
    for &i in meta {
        if i >= ds.len() || !ds.splits[i].is_training() {
            return Err(invalid(format!("meta index {i} is not a training sample")));
        }
        if seen[i] {
            return Err(invalid(format!("meta index {i} listed twice")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Full meta re-weighting run from a fresh initialisation seeded by `config.seed`.
pub fn run_meta_reweighting(
    config: &TrainConfig,
    arch: &Architecture,
    ds: &Dataset,
    meta: &[usize],
) -> Result<RunArtifacts> {
    let init = arch.init(ds, config.seed)?;
    run_from(config, init, ds, meta)
}

/// Meta re-weighting starting from the given parameters.
pub fn run_from(
    config: &TrainConfig,
    init: NetworkParams,
    ds: &Dataset,
    meta: &[usize],
) -> Result<RunArtifacts> {
    config.validate()?;
    check_meta(ds, meta)?;
    if meta.is_empty() {
        return Err(Error::Empty("meta set"));
    }
    if ds.indices(Split::Validation).is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let is_meta = {
        let mut flags = vec![false; ds.len()];
        for &i in meta {
            flags[i] = true;
        }
        flags
    };
    let pool: Vec<usize> = ds
        .training_pool()
        .into_iter()
        .filter(|&i| !is_meta[i])
        .collect();
    if pool.is_empty() {
        return Err(Error::Degenerate(
            "every training sample is a meta sample".into(),
        ));
    }
    let meta_x = ds.rows(meta);
    let meta_y = ds.clean(meta);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_ba7c4);
    let mut params = init;
    let mut optimizer = Sgd::new(config.sgd())?;
    let mut weights = vec![config.weight_init; pool.len()];
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut checkpoints = CheckpointStore::new();
    let mut trajectory = Vec::with_capacity(config.epochs);
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let alpha = config.lr_at(epoch);
        optimizer.set_lr(alpha)?;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&k| pool[k]).collect();
            let x = ds.rows(&idx);
            let y = ds.observed(&idx);
            let batch = batch_trace(&params, x.view(), &y)?;
            let loss = batch.mean_loss(&y);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Divergence { epoch, loss });
            }
            let step_weights = match config.weight_rule {
                WeightRule::Shu => {
                    let mut w: Vec<f64> = chunk.iter().map(|&k| weights[k]).collect();
                    let virt = virtual_update(&params, &batch, &w, alpha)?;
                    let delta = meta_weight_gradient(
                        &virt,
                        meta_x.view(),
                        &meta_y,
                        &batch,
                        alpha,
                        config.weight_lr,
                    )?;
                    apply_weight_update_shu(&mut w, &delta);
                    for (&k, &v) in chunk.iter().zip(&w) {
                        weights[k] = v;
                    }
                    w
                }
                WeightRule::Ren => {
                    // the perturbation starts at zero, so the virtual step is the identity
                    let delta = meta_weight_gradient(
                        &params,
                        meta_x.view(),
                        &meta_y,
                        &batch,
                        alpha,
                        config.weight_lr,
                    )?;
                    let w = apply_weight_update_ren(&delta);
                    for (&k, &v) in chunk.iter().zip(&w) {
                        weights[k] = v;
                    }
                    // normalised weights already average the batch
                    let n = w.len() as f64;
                    w.into_iter().map(|v| v * n).collect()
                }
            };
            weighted_step(&mut params, &batch, &step_weights, &mut optimizer)?;
        }
        if !params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: f64::NAN,
            });
        }
        let m = evaluate(&params, ds, epoch, &pool)?;
        checkpoints.checkpoint(epoch, &params, m.validation)?;
        metrics.push(m);
        trajectory.push(WeightVector { w: weights.clone() });
    }
    Ok(RunArtifacts {
        params,
        checkpoints,
        pool,
        meta: meta.to_vec(),
        trajectory,
        metrics,
    })
}

/// Draws `m0` meta samples uniformly from the training pool and runs meta
/// re-weighting with them.
pub fn warmup(
    config: &TrainConfig,
    arch: &Architecture,
    ds: &Dataset,
    m0: usize,
    seed: u64,
) -> Result<RunArtifacts> {
    let pool = ds.training_pool();
    if m0 == 0 {
        return Err(invalid("warm-up needs at least one meta sample"));
    }
    if m0 >= pool.len() {
        return Err(invalid(format!(
            "{m0} warm-up meta samples leave nothing to train on ({} training samples)",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut meta: Vec<usize> = index::sample(&mut rng, pool.len(), m0)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    meta.sort_unstable();
    run_meta_reweighting(config, arch, ds, &meta)
}

/// Plain training on the meta set alone (clean labels), starting from `init`.
pub fn finetune(
    config: &TrainConfig,
    init: NetworkParams,
    ds: &Dataset,
    meta: &[usize],
) -> Result<RunArtifacts> {
    config.validate()?;
    check_meta(ds, meta)?;
    if meta.is_empty() {
        return Err(Error::Empty("meta set"));
    }
    let x = ds.rows(meta);
    let y = ds.clean(meta);
    let pool = ds.training_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xf1_7e);
    let mut params = init;
    let mut optimizer = Sgd::new(config.sgd())?;
    let mut order: Vec<usize> = (0..meta.len()).collect();
    let mut checkpoints = CheckpointStore::new();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        optimizer.set_lr(config.lr_at(epoch))?;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let bx = x.select(Axis(0), chunk);
            let by: Vec<usize> = chunk.iter().map(|&k| y[k]).collect();
            let batch = batch_trace(&params, bx.view(), &by)?;
            let loss = batch.mean_loss(&by);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Divergence { epoch, loss });
            }
            weighted_step(&mut params, &batch, &vec![1.0; chunk.len()], &mut optimizer)?;
        }
        let m = evaluate(&params, ds, epoch, &pool)?;
        checkpoints.checkpoint(epoch, &params, m.validation)?;
        metrics.push(m);
    }
    Ok(RunArtifacts {
        params,
        checkpoints,
        pool: Vec::new(),
        meta: meta.to_vec(),
        trajectory: vec![WeightVector { w: Vec::new() }; config.epochs],
        metrics,
    })
}
