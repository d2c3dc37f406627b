use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    baseline::plain_kmeans, extract_meta_samples, kmeans_with_restart, prune_near_existing,
    KMeansConfig,
};
use crate::data::Dataset;
use crate::error::{format_err, invalid, Error, Result};
use crate::features::{
    assemble_features, sample_checkpoints, CheckpointSampling, FeatureLayout, FeatureMatrix,
    FeatureMethod, FeatureSpec,
};
use crate::nn::{CheckpointStore, GradMode};
use crate::reweight::{run_meta_reweighting, warmup, Architecture, RunArtifacts, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clusterer {
    /// Weighted K-means with absolute cosine.
    #[default]
    Weighted,
    /// Euclidean K-means on the same features.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub method: FeatureMethod,
    /// Total meta samples, warm-up included.
    pub budget: usize,
    /// Randomly drawn warm-up meta samples.
    pub m0: usize,
    /// Clusters per round; defaults to the whole remaining budget in one round.
    #[serde(default)]
    pub per_round: Option<usize>,
    /// Checkpoints sampled per feature.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    #[serde(default)]
    pub sampling: CheckpointSampling,
    /// Layer draws per checkpoint (GBC).
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub raw: bool,
    #[serde(default = "default_keep")]
    pub keep_fraction: f64,
    #[serde(default = "default_mode")]
    pub label_mode: GradMode,
    #[serde(default)]
    pub clusterer: Clusterer,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
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

fn default_iters() -> usize {
    super::MAX_ITERS
}

impl SelectionConfig {
    pub fn new(method: FeatureMethod, budget: usize, m0: usize) -> Self {
        SelectionConfig {
            method,
            budget,
            m0,
            per_round: None,
            checkpoints: default_checkpoints(),
            sampling: CheckpointSampling::Uniform,
            draws: default_draws(),
            raw: false,
            keep_fraction: default_keep(),
            label_mode: default_mode(),
            clusterer: Clusterer::Weighted,
            max_iters: default_iters(),
            tol: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m0 == 0 {
            return Err(invalid("m0 must be at least 1"));
        }
        if self.budget < self.m0 {
            return Err(invalid(format!(
                "budget {} is below the warm-up size {}",
                self.budget, self.m0
            )));
        }
        if self.per_round == Some(0) {
            return Err(invalid("per_round must be at least 1"));
        }
        if self.checkpoints == 0 || self.draws == 0 {
            return Err(invalid("checkpoints and draws must be at least 1"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(invalid("keep_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            method: self.method,
            mode: self.label_mode,
            draws: self.draws,
            raw: self.raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRound {
    /// Candidates left after pruning (dataset indices).
    pub survivors: Vec<usize>,
    /// Samples chosen this round (dataset indices).
    pub chosen: Vec<usize>,
    pub clusters: Vec<usize>,
    pub similarities: Vec<f64>,
    /// Meta set after this round.
    pub cumulative: Vec<usize>,
    pub checkpoints: Vec<usize>,
    /// Layout of the features this round clustered.
    pub layout: FeatureLayout,
    /// Final weighted K-means centroids (empty for the plain clusterer).
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub warmup_meta: Vec<usize>,
    pub meta: Vec<usize>,
    pub rounds: Vec<SelectionRound>,
    /// The warm-up run followed by one run per round.
    pub runs: Vec<RunArtifacts>,
}

impl SelectionOutcome {
    pub fn final_run(&self) -> &RunArtifacts {
        self.runs.last().expect("the warm-up run is always present")
    }
}

/// Epochs to featurise: `k` sampled after the best epoch. When fewer than
/// `k` epochs follow it, all of them are used; when none do, the last epoch.
pub fn featurisation_epochs(
    store: &CheckpointStore,
    k: usize,
    mode: CheckpointSampling,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match sample_checkpoints(store, k, mode, &mut rng) {
        Ok(e) => Ok(e),
        Err(Error::InvalidArgument(_)) => {
            let best = store.best_epoch().ok_or(Error::Empty("checkpoint store"))?;
            let after: Vec<usize> = store.epochs().filter(|&e| e > best).collect();
            if after.is_empty() {
                Ok(vec![store.last_epoch().expect("store is nonempty")])
            } else {
                Ok(after.into_iter().rev().take(k).rev().collect())
            }
        }
        Err(e) => Err(e),
    }
}

/// Features of `candidates` followed by `meta` under one shared layer plan.
/// Candidates use observed labels, meta samples their clean labels.
pub fn candidate_and_meta_features(
    ds: &Dataset,
    candidates: &[usize],
    meta: &[usize],
    store: &CheckpointStore,
    epochs: &[usize],
    spec: FeatureSpec,
    seed: u64,
) -> Result<FeatureMatrix> {
    let indices: Vec<usize> = candidates.iter().chain(meta).copied().collect();
    let labels: Vec<usize> = ds
        .observed(candidates)
        .into_iter()
        .chain(ds.clean(meta))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assemble_features(ds, &indices, Some(&labels), store, epochs, spec, &mut rng)
}

/// Full selection: random warm-up followed by clustering rounds.
pub fn run_selection_pipeline(
    ds: &Dataset,
    train: &TrainConfig,
    arch: &Architecture,
    config: &SelectionConfig,
) -> Result<SelectionOutcome> {
    config.validate()?;
    let warm = warmup(train, arch, ds, config.m0, config.seed)?;
    select_after_warmup(ds, train, arch, config, warm)
}

/// Clustering rounds on top of an existing warm-up run.
pub fn select_after_warmup(
    ds: &Dataset,
    train: &TrainConfig,
    arch: &Architecture,
    config: &SelectionConfig,
    warm: RunArtifacts,
) -> Result<SelectionOutcome> {
    config.validate()?;
    let warmup_meta = warm.meta.clone();
    let mut meta = warmup_meta.clone();
    let mut runs = vec![warm];
    let mut rounds = Vec::new();
    let pool = ds.training_pool();
    if config.budget > pool.len() {
        return Err(invalid(format!(
            "budget {} exceeds the {} training samples",
            config.budget,
            pool.len()
        )));
    }

    let mut round = 0u64;
    while meta.len() < config.budget {
        round += 1;
        let want = config
            .per_round
            .unwrap_or(config.budget)
            .min(config.budget - meta.len());
        let store = &runs.last().expect("warm-up present").checkpoints;
        let seed = round_seed(config.seed, round);
        let epochs = featurisation_epochs(store, config.checkpoints, config.sampling, seed)?;

        let in_meta: std::collections::HashSet<usize> = meta.iter().copied().collect();
        let candidates: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|i| !in_meta.contains(i))
            .collect();
        let feats = candidate_and_meta_features(
            ds,
            &candidates,
            &meta,
            store,
            &epochs,
            config.feature_spec(),
            seed,
        )?;
        let picks = pick_from_features(&feats, candidates.len(), want, config, seed)?;
        let layout = feats.layout;
        meta.extend(&picks.chosen);
        rounds.push(SelectionRound {
            survivors: picks.survivors,
            chosen: picks.chosen,
            clusters: picks.clusters,
            similarities: picks.similarities,
            cumulative: meta.clone(),
            checkpoints: epochs,
            layout,
            centroids: picks.centroids,
        });
        runs.push(run_meta_reweighting(train, arch, ds, &meta)?);
    }
    Ok(SelectionOutcome {
        warmup_meta,
        meta,
        rounds,
        runs,
    })
}

/// Seed of selection round `round` (1-based).
pub fn round_seed(seed: u64, round: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(round)
}

/// Outcome of clustering one round's features.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPicks {
    /// Dataset indices of the candidates that survived pruning.
    pub survivors: Vec<usize>,
    pub chosen: Vec<usize>,
    pub clusters: Vec<usize>,
    /// NaN for the plain clusterer.
    pub similarities: Vec<f64>,
    /// Empty for the plain clusterer.
    pub centroids: Vec<Vec<f64>>,
}

/// Prunes candidates near the current meta set and clusters the survivors
/// into `want` groups. `feats` holds `n_candidates` candidate rows followed
/// by the meta rows.
pub fn pick_from_features(
    feats: &FeatureMatrix,
    n_candidates: usize,
    want: usize,
    config: &SelectionConfig,
    seed: u64,
) -> Result<RoundPicks> {
    if n_candidates > feats.len() {
        return Err(invalid(format!(
            "{n_candidates} candidates but {} feature rows",
            feats.len()
        )));
    }
    let cand_f = feats.data.slice(s![..n_candidates, ..]);
    let meta_f = feats.data.slice(s![n_candidates.., ..]);
    let kept = prune_near_existing(cand_f, meta_f, config.keep_fraction)?;
    if kept.len() < want {
        return Err(Error::Degenerate(format!(
            "{} candidates survive pruning but {want} meta samples are still needed",
            kept.len()
        )));
    }
    let survivors: Vec<usize> = kept.iter().map(|&k| feats.rows[k]).collect();
    let surv_f = cand_f.select(Axis(0), &kept);
    let mut centroids = Vec::new();
    let picks: Vec<(usize, usize, f64)> = match config.clusterer {
        Clusterer::Weighted => {
            let kcfg = KMeansConfig {
                max_iters: config.max_iters,
                tol: config.tol,
            };
            let model = kmeans_with_restart(surv_f.view(), want, seed, kcfg)?;
            centroids = model
                .centroids
                .rows()
                .into_iter()
                .map(|c| c.to_vec())
                .collect();
            extract_meta_samples(&model, surv_f.view())
        }
        Clusterer::Plain => plain_kmeans(surv_f.view(), want, seed, config.max_iters)?
            .into_iter()
            .enumerate()
            .map(|(c, j)| (j, c, f64::NAN))
            .collect(),
    };
    if picks.is_empty() {
        return Err(Error::Degenerate(
            "a selection round chose no samples".into(),
        ));
    }
    Ok(RoundPicks {
        chosen: picks.iter().map(|p| survivors[p.0]).collect(),
        clusters: picks.iter().map(|p| p.1).collect(),
        similarities: picks.iter().map(|p| p.2).collect(),
        survivors,
        centroids,
    })
}

/// One line of a selection results file.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRecord {
    pub round: usize,
    pub sample_id: u64,
    /// `None` for warm-up samples and baseline picks.
    pub cluster: Option<usize>,
    pub similarity: Option<f64>,
}

/// Records of an outcome: warm-up samples are round 0 without cluster or
/// similarity, plain-clusterer picks have no similarity.
pub fn selection_records(outcome: &SelectionOutcome, ds: &Dataset) -> Vec<SelectionRecord> {
    let mut out: Vec<SelectionRecord> = outcome
        .warmup_meta
        .iter()
        .map(|&i| SelectionRecord {
            round: 0,
            sample_id: ds.ids[i],
            cluster: None,
            similarity: None,
        })
        .collect();
    for (r, round) in outcome.rounds.iter().enumerate() {
        for ((&i, &c), &s) in round
            .chosen
            .iter()
            .zip(&round.clusters)
            .zip(&round.similarities)
        {
            out.push(SelectionRecord {
                round: r + 1,
                sample_id: ds.ids[i],
                cluster: Some(c),
                similarity: (!s.is_nan()).then_some(s),
            });
        }
    }
    out
}

/// Writes `round, sample_id, cluster_id, similarity` with `-` for absent values.
pub fn write_selection_records(path: &Path, records: &[SelectionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "round\tsample_id\tcluster_id\tsimilarity")?;
    for r in records {
        let c = r.cluster.map_or("-".to_string(), |c| c.to_string());
        let s = r.similarity.map_or("-".to_string(), |s| format!("{s:?}"));
        writeln!(w, "{}\t{}\t{c}\t{s}", r.round, r.sample_id)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_selection(path: &Path, outcome: &SelectionOutcome, ds: &Dataset) -> Result<()> {
    write_selection_records(path, &selection_records(outcome, ds))
}

pub fn read_selection(path: &Path) -> Result<Vec<SelectionRecord>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let bad = |line: &str| format_err("selection", format!("bad line `{line}`"));
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(&line));
        }
        fn opt(s: &str) -> Option<&str> {
            (s != "-").then_some(s)
        }
        out.push(SelectionRecord {
            round: cols[0].parse().map_err(|_| bad(&line))?,
            sample_id: cols[1].parse().map_err(|_| bad(&line))?,
            cluster: opt(cols[2])
                .map(str::parse)
                .transpose()
                .map_err(|_| bad(&line))?,
            similarity: opt(cols[3])
                .map(str::parse)
                .transpose()
                .map_err(|_| bad(&line))?,
        });
    }
    Ok(out)
}

/// Dataset indices of the samples listed in a selection file.
pub fn selected_indices(records: &[SelectionRecord], ds: &Dataset) -> Result<Vec<usize>> {
    let by_id: HashMap<u64, usize> = ds.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    records
        .iter()
        .map(|r| {
            by_id.get(&r.sample_id).copied().ok_or_else(|| {
                format_err(
                    "selection",
                    format!("sample id {} not in dataset", r.sample_id),
                )
            })
        })
        .collect()
}
