//! Seeded end-to-end experiments: dataset construction, per-method runs and
//! aggregated reports.

mod run;

pub use run::{
    baseline_meta, diagnose, diagnose_round, run_experiment, run_method, run_seed, thread_count,
    CellResult, Diagnostics, ExperimentReport, SeedContext, METRICS,
};

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{Clusterer, SelectionConfig};
use crate::data::{
    build_imbalanced, cyclic_mapping, gen_gaussian_mixture, inject_adversarial_noise,
    inject_uniform_noise, load_idx, CorruptionReport, Dataset, GaussianMixtureSpec, NoiseKind,
    Split,
};
use crate::error::{format_err, invalid, Result};
use crate::features::{CheckpointSampling, FeatureMethod};
use crate::nn::GradMode;
use crate::reweight::{Architecture, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rbc,
    Gbc,
    Random,
    Certain,
    Uncertain,
    PlainKmeans,
    Finetune,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Rbc,
        Method::Gbc,
        Method::Random,
        Method::Certain,
        Method::Uncertain,
        Method::PlainKmeans,
        Method::Finetune,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Rbc => "rbc",
            Method::Gbc => "gbc",
            Method::Random => "random",
            Method::Certain => "certain",
            Method::Uncertain => "uncertain",
            Method::PlainKmeans => "plain_kmeans",
            Method::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Side of the square average-pooling window (1 keeps full resolution).
    #[serde(default = "one")]
    pub pool: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Toy(GaussianMixtureSpec),
    Idx(IdxSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Toy(GaussianMixtureSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: NoiseKind,
    /// Percentage of train-split labels to corrupt.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceSpec {
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    pub budget: usize,
    pub m0: usize,
    #[serde(default)]
    pub per_round: Option<usize>,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    #[serde(default)]
    pub sampling: CheckpointSampling,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub raw: bool,
    #[serde(default = "default_keep")]
    pub keep_fraction: f64,
    #[serde(default = "default_mode")]
    pub label_mode: GradMode,
    /// Feature method behind plain K-means.
    #[serde(default = "default_plain_features")]
    pub plain_features: FeatureMethod,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub tol: f64,
}

fn default_checkpoints() -> usize {
    5
}
fn default_draws() -> usize {
    5
}
fn default_keep() -> f64 {
    0.5
}
fn default_mode() -> GradMode {
    GradMode::LabelFree
}
fn default_plain_features() -> FeatureMethod {
    FeatureMethod::Rbc
}
fn default_iters() -> usize {
    crate::cluster::MAX_ITERS
}

impl SelectionSpec {
    pub fn new(budget: usize, m0: usize) -> Self {
        SelectionSpec {
            budget,
            m0,
            per_round: None,
            checkpoints: default_checkpoints(),
            sampling: CheckpointSampling::Uniform,
            draws: default_draws(),
            raw: false,
            keep_fraction: default_keep(),
            label_mode: default_mode(),
            plain_features: default_plain_features(),
            max_iters: default_iters(),
            tol: 0.0,
        }
    }

    /// Clustering configuration for `method` (RBC, GBC or plain K-means).
    pub fn selection_config(&self, method: Method, seed: u64) -> Result<SelectionConfig> {
        let (feature, clusterer) = match method {
            Method::Rbc => (FeatureMethod::Rbc, Clusterer::Weighted),
            Method::Gbc => (FeatureMethod::Gbc, Clusterer::Weighted),
            Method::PlainKmeans => (self.plain_features, Clusterer::Plain),
            other => return Err(invalid(format!("{other} does not cluster"))),
        };
        let mut cfg = SelectionConfig::new(feature, self.budget, self.m0);
        cfg.per_round = self.per_round;
        cfg.checkpoints = self.checkpoints;
        cfg.sampling = self.sampling;
        cfg.draws = self.draws;
        cfg.raw = self.raw;
        cfg.keep_fraction = self.keep_fraction;
        cfg.label_mode = self.label_mode;
        cfg.clusterer = clusterer;
        cfg.max_iters = self.max_iters;
        cfg.tol = self.tol;
        cfg.seed = seed;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Size of the near-boundary subset for the second AUC.
    #[serde(default = "default_boundary")]
    pub boundary_k: usize,
    /// D statistics and stable-sample counts for clustering methods.
    #[serde(default = "yes")]
    pub diagnostics: bool,
}

fn default_boundary() -> usize {
    100
}
fn yes() -> bool {
    true
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec {
            boundary_k: default_boundary(),
            diagnostics: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub corruption: Option<CorruptionSpec>,
    #[serde(default)]
    pub imbalance: Option<ImbalanceSpec>,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub selection: SelectionSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    /// The noisy four-Gaussian toy problem: 60% flipped train labels, a
    /// two-hidden-layer net and six meta samples.
    fn default() -> Self {
        ExperimentConfig {
            seeds: (0..10).collect(),
            methods: vec![Method::Random, Method::Rbc],
            dataset: DatasetSpec::default(),
            corruption: Some(CorruptionSpec {
                kind: NoiseKind::Uniform,
                percent: 60.0,
            }),
            imbalance: None,
            architecture: Architecture {
                hidden: vec![16, 16],
                activation: crate::nn::Activation::Relu,
            },
            train: TrainConfig {
                lr: 0.1,
                weight_lr: 1.0,
                momentum: 0.8,
                batch_size: 100,
                epochs: 50,
                weight_rule: crate::reweight::WeightRule::Ren,
                ..TrainConfig::default()
            },
            selection: SelectionSpec::new(6, 1),
            analysis: AnalysisSpec::default(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| format_err("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| format_err("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("the seed list is empty"));
        }
        if self.methods.is_empty() {
            return Err(invalid("the method list is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(m) = self.methods.iter().find(|m| !seen.insert(**m)) {
            return Err(invalid(format!("method {m} listed twice")));
        }
        let mut seeds = std::collections::HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seeds.insert(**s)) {
            return Err(invalid(format!("seed {s} listed twice")));
        }
        self.train.validate()?;
        self.selection
            .selection_config(Method::Rbc, 0)?
            .validate()?;
        if let Some(c) = &self.corruption {
            if !(0.0..=100.0).contains(&c.percent) {
                return Err(invalid(format!(
                    "corruption percent must lie in [0, 100], got {}",
                    c.percent
                )));
            }
        }
        if let Some(i) = &self.imbalance {
            if !(i.factor >= 1.0 && i.factor.is_finite()) {
                return Err(invalid(format!(
                    "imbalance factor must be >= 1, got {}",
                    i.factor
                )));
            }
        }
        if let DatasetSpec::Idx(spec) = &self.dataset {
            if spec.pool == 0 {
                return Err(invalid("pool must be at least 1"));
            }
            if spec.train == 0 || spec.validation == 0 || spec.test == 0 {
                return Err(invalid("every split needs at least one sample"));
            }
        }
        Ok(())
    }

    /// Makes relative dataset paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSpec::Idx(spec) = &mut self.dataset {
            for p in [&mut spec.images, &mut spec.labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if let Some(out) = &mut self.out {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
    }

    /// Training configuration for one seed.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

const NOISE_STREAM: u64 = 0x6e6f_6973;
const IMBALANCE_STREAM: u64 = 0x696d_6261;
const SUBSET_STREAM: u64 = 0x7375_6273;

/// Clean dataset for `seed` before imbalance and corruption.
pub fn base_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::Toy(toy) => gen_gaussian_mixture(toy, seed),
        DatasetSpec::Idx(idx) => {
            let full = load_idx(&idx.images, &idx.labels)?;
            let full = if idx.pool > 1 {
                avg_pool(&full, idx.pool)?
            } else {
                full
            };
            let want = idx.train + idx.validation + idx.test;
            if want > full.len() {
                return Err(invalid(format!(
                    "{want} samples requested, the files hold {}",
                    full.len()
                )));
            }
            let mut order: Vec<usize> = (0..full.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SUBSET_STREAM));
            order.truncate(want);
            let mut ds = full.subset(&order);
            for (k, s) in ds.splits.iter_mut().enumerate() {
                *s = if k < idx.train {
                    Split::Train
                } else if k < idx.train + idx.validation {
                    Split::Validation
                } else {
                    Split::Test
                };
            }
            Ok(ds)
        }
    }
}

/// Averages non-overlapping `k × k` windows of square images.
pub fn avg_pool(ds: &Dataset, k: usize) -> Result<Dataset> {
    let side = (ds.dim() as f64).sqrt().round() as usize;
    if side * side != ds.dim() || side % k != 0 {
        return Err(invalid(format!(
            "cannot pool {}-pixel images with a {k}x{k} window",
            ds.dim()
        )));
    }
    let out_side = side / k;
    let scale = 1.0 / (k * k) as f64;
    let features = Array2::from_shape_fn((ds.len(), out_side * out_side), |(i, p)| {
        let (r, c) = (p / out_side, p % out_side);
        let mut acc = 0.0;
        for dr in 0..k {
            for dc in 0..k {
                acc += ds.features[[i, (r * k + dr) * side + c * k + dc]];
            }
        }
        acc * scale
    });
    Ok(Dataset {
        features,
        ..ds.clone()
    })
}

/// Imbalanced (when configured) then corrupted dataset for `seed`.
pub fn corrupt_dataset(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    seed: u64,
) -> Result<(Dataset, Option<CorruptionReport>)> {
    let ds = match &cfg.imbalance {
        Some(i) => build_imbalanced(ds, i.factor, seed ^ IMBALANCE_STREAM)?,
        None => ds.clone(),
    };
    match &cfg.corruption {
        None => Ok((ds, None)),
        Some(c) => {
            let (out, report) = match c.kind {
                NoiseKind::Uniform => inject_uniform_noise(&ds, c.percent, seed ^ NOISE_STREAM)?,
                NoiseKind::Adversarial => inject_adversarial_noise(
                    &ds,
                    c.percent,
                    &cyclic_mapping(ds.class_count),
                    seed ^ NOISE_STREAM,
                )?,
            };
            Ok((out, Some(report)))
        }
    }
}

/// The dataset every method of `seed` trains on.
pub fn build_dataset(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Dataset, Option<CorruptionReport>)> {
    corrupt_dataset(cfg, &base_dataset(&cfg.dataset, seed)?, seed)
}
