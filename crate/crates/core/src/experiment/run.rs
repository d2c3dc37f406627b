use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_dataset, ExperimentConfig, Method};
use crate::analysis::{
    d_statistics, format_d_table, format_method_table, mco_value, msso_value, stable_sample_count,
    summarize, verify_bound, weight_quality, write_long_format, BoundCheck, DStatistics,
    LongRecord, RunManifest, Summary,
};
use crate::cluster::{
    baseline_select, kmeans_assign, kmeans_update, predictive_entropy, select_after_warmup,
    BaselineKind, SelectionOutcome,
};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::features::{features_for_layout, FeatureLayout};
use crate::nn::{CheckpointStore, GradMode};
use crate::reweight::{finetune, run_meta_reweighting, warmup, RunArtifacts, TrainConfig};

/// Per-cell metrics, in report column order.
pub const METRICS: [&str; 6] = [
    "test_accuracy",
    "auc",
    "auc_boundary",
    "d_min",
    "d_quantile_5",
    "stable_fraction",
];

/// Objective and stability diagnostics of the last clustering round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Samples that were clustered (pruning survivors).
    pub candidates: usize,
    pub msso: f64,
    pub mco: f64,
    pub bound: BoundCheck,
    pub d: DStatistics,
    pub stable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub test_accuracy: f64,
    /// NaN where the method has no sample weights.
    pub auc: f64,
    pub auc_boundary: f64,
    pub meta_ids: Vec<u64>,
    pub diagnostics: Option<Diagnostics>,
    pub error: Option<String>,
}

impl CellResult {
    fn failed(method: Method, seed: u64, err: &Error) -> Self {
        CellResult {
            method,
            seed,
            test_accuracy: f64::NAN,
            auc: f64::NAN,
            auc_boundary: f64::NAN,
            meta_ids: Vec::new(),
            diagnostics: None,
            error: Some(err.to_string()),
        }
    }

    pub fn metric(&self, name: &str) -> f64 {
        let diag = |f: fn(&Diagnostics) -> f64| self.diagnostics.as_ref().map_or(f64::NAN, f);
        match name {
            "test_accuracy" => self.test_accuracy,
            "auc" => self.auc,
            "auc_boundary" => self.auc_boundary,
            "d_min" => diag(|d| d.d.min),
            "d_quantile_5" => diag(|d| d.d.quantile_5),
            "stable_fraction" => diag(|d| d.stable as f64 / d.candidates as f64),
            _ => f64::NAN,
        }
    }
}

/// Dataset and warm-up run shared by every method of one seed.
pub struct SeedContext {
    pub seed: u64,
    pub ds: Dataset,
    pub train: TrainConfig,
    pub warm: RunArtifacts,
}

impl SeedContext {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let (ds, _) = build_dataset(cfg, seed)?;
        Self::with_dataset(cfg, seed, ds)
    }

    pub fn with_dataset(cfg: &ExperimentConfig, seed: u64, ds: Dataset) -> Result<Self> {
        let train = cfg.train_for(seed);
        let warm = warmup(&train, &cfg.architecture, &ds, cfg.selection.m0, seed)?;
        Ok(SeedContext {
            seed,
            ds,
            train,
            warm,
        })
    }
}

fn baseline_seed(seed: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(1)
}

/// Meta set and final run of one method; clustering methods also return
/// their selection rounds.
pub fn run_method(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    method: Method,
) -> Result<(RunArtifacts, Vec<usize>, Option<SelectionOutcome>)> {
    let ds = &ctx.ds;
    match method {
        Method::Rbc | Method::Gbc | Method::PlainKmeans => {
            let sel = cfg.selection.selection_config(method, ctx.seed)?;
            let outcome =
                select_after_warmup(ds, &ctx.train, &cfg.architecture, &sel, ctx.warm.clone())?;
            let run = outcome.final_run().clone();
            let meta = outcome.meta.clone();
            Ok((run, meta, Some(outcome)))
        }
        Method::Random | Method::Certain | Method::Uncertain | Method::Finetune => {
            let meta = baseline_meta(cfg.selection.budget, ds, &ctx.warm, method, ctx.seed)?;
            let run = if method == Method::Finetune {
                finetune(&ctx.train, ctx.warm.params.clone(), ds, &meta)?
            } else {
                run_meta_reweighting(&ctx.train, &cfg.architecture, ds, &meta)?
            };
            Ok((run, meta, None))
        }
    }
}

/// Warm-up meta samples topped up to `budget` by a non-clustering method
/// (fine-tuning draws its samples at random).
pub fn baseline_meta(
    budget: usize,
    ds: &Dataset,
    warm: &RunArtifacts,
    method: Method,
    seed: u64,
) -> Result<Vec<usize>> {
    let kind = match method {
        Method::Random | Method::Finetune => BaselineKind::Random,
        Method::Certain => BaselineKind::Certain,
        Method::Uncertain => BaselineKind::Uncertain,
        other => return Err(invalid(format!("{other} selects by clustering"))),
    };
    let mut meta = warm.meta.clone();
    if budget < meta.len() {
        return Err(invalid(format!(
            "budget {budget} is below the {} warm-up samples",
            meta.len()
        )));
    }
    let taken: std::collections::HashSet<usize> = meta.iter().copied().collect();
    let candidates: Vec<usize> = ds
        .training_pool()
        .into_iter()
        .filter(|i| !taken.contains(i))
        .collect();
    let entropy = match kind {
        BaselineKind::Random => None,
        _ => Some(predictive_entropy(
            &warm.params,
            ds.rows(&candidates).view(),
        )?),
    };
    let picks = baseline_select(
        kind,
        candidates.len(),
        entropy.as_deref(),
        None,
        budget - meta.len(),
        baseline_seed(seed),
    )?;
    meta.extend(picks.iter().map(|&p| candidates[p]));
    Ok(meta)
}

/// Diagnostics for selection round `round` (0-based).
pub fn diagnose_round(
    ds: &Dataset,
    outcome: &SelectionOutcome,
    round: usize,
) -> Result<Diagnostics> {
    let r = outcome
        .rounds
        .get(round)
        .ok_or_else(|| invalid(format!("no selection round {round}")))?;
    if r.centroids.is_empty() {
        return Err(invalid("the round kept no centroids"));
    }
    let dim = r.centroids[0].len();
    let flat: Vec<f64> = r.centroids.iter().flatten().copied().collect();
    let centroids = Array2::from_shape_vec((r.centroids.len(), dim), flat)
        .map_err(|e| invalid(format!("centroids: {e}")))?;
    diagnose(
        ds,
        &outcome.runs[round].checkpoints,
        &r.layout,
        &r.survivors,
        centroids.view(),
    )
}

/// Objective, D statistics, bound check and stable samples for clustered
/// samples `survivors` whose features follow `layout`.
///
/// The objective, D statistics and bound check use label-aware gradients
/// (observed labels) against centroids rebuilt from the label-free clusters;
/// the stable count compares label-free features with clean-label features
/// against the label-free centroids themselves.
pub fn diagnose(
    ds: &Dataset,
    store: &CheckpointStore,
    layout: &FeatureLayout,
    survivors: &[usize],
    centroids: ArrayView2<f64>,
) -> Result<Diagnostics> {
    let observed = ds.observed(survivors);
    let clean = ds.clean(survivors);
    let lf = features_for_layout(ds, survivors, Some(&observed), store, layout, layout.mode)?;
    let assignment = kmeans_assign(lf.data.view(), centroids)?;

    let clean_full =
        features_for_layout(ds, survivors, Some(&clean), store, layout, GradMode::Full)?;
    let stable = stable_sample_count(lf.data.view(), clean_full.data.view(), centroids)?;
    drop(clean_full);
    drop(lf);

    let full = features_for_layout(
        ds,
        survivors,
        Some(&observed),
        store,
        layout,
        GradMode::Full,
    )?;
    let (aware, empty) = kmeans_update(full.data.view(), &assignment, centroids.nrows())?;
    let live: Vec<usize> = (0..aware.nrows()).filter(|&i| !empty[i]).collect();
    let aware = aware.select(Axis(0), &live);
    let (_, d) = d_statistics(full.data.view(), aware.view())?;
    Ok(Diagnostics {
        candidates: survivors.len(),
        msso: msso_value(full.data.view(), aware.view())?,
        mco: mco_value(full.data.view(), aware.view())?,
        bound: verify_bound(full.data.view(), aware.view())?,
        d,
        stable: stable.count,
    })
}

fn evaluate_cell(cfg: &ExperimentConfig, ctx: &SeedContext, method: Method) -> Result<CellResult> {
    let ds = &ctx.ds;
    let (run, meta, outcome) = run_method(cfg, ctx, method)?;
    let (auc, auc_boundary) = if run.trajectory.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        match weight_quality(
            &run.params,
            ds,
            &run.pool,
            &run.final_weights().w,
            cfg.analysis.boundary_k,
        ) {
            Ok(q) => (q.auc_all, q.auc_boundary),
            Err(Error::InvalidArgument(_)) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        }
    };
    let diagnostics = match &outcome {
        Some(o)
            if cfg.analysis.diagnostics
                && !o.rounds.is_empty()
                && method != Method::PlainKmeans =>
        {
            Some(diagnose_round(ds, o, o.rounds.len() - 1)?)
        }
        _ => None,
    };
    Ok(CellResult {
        method,
        seed: ctx.seed,
        test_accuracy: run.final_metrics().test,
        auc,
        auc_boundary,
        meta_ids: meta.iter().map(|&i| ds.ids[i]).collect(),
        diagnostics,
        error: None,
    })
}

/// Every configured method for one seed. Failures become cells with an error.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Vec<CellResult> {
    match SeedContext::new(cfg, seed) {
        Err(e) => cfg
            .methods
            .iter()
            .map(|&m| CellResult::failed(m, seed, &e))
            .collect(),
        Ok(ctx) => cfg
            .methods
            .iter()
            .map(|&m| {
                evaluate_cell(cfg, &ctx, m).unwrap_or_else(|e| CellResult::failed(m, seed, &e))
            })
            .collect(),
    }
}

/// Worker threads for seed-level parallelism: `METASEL_THREADS` when set,
/// otherwise rayon's default.
pub fn thread_count() -> Option<usize> {
    std::env::var("METASEL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    let per_seed: Vec<Vec<CellResult>> =
        pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect());
    Ok(ExperimentReport {
        methods: cfg.methods.clone(),
        seeds: cfg.seeds.clone(),
        cells: per_seed.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
}

impl ExperimentReport {
    pub fn cell(&self, method: Method, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.seed == seed)
    }

    pub fn values(&self, method: Method, metric: &str) -> Vec<f64> {
        self.seeds
            .iter()
            .map(|&s| self.cell(method, s).map_or(f64::NAN, |c| c.metric(metric)))
            .collect()
    }

    pub fn summary(&self, method: Method, metric: &str) -> Summary {
        summarize(&self.values(method, metric))
    }

    /// Method × metric table of mean ± std (accuracies and AUCs in percent).
    pub fn method_table(&self) -> String {
        let metrics = ["test_accuracy", "auc", "auc_boundary"];
        let rows: Vec<(String, Vec<Summary>)> = self
            .methods
            .iter()
            .map(|&m| {
                let cells = metrics
                    .iter()
                    .map(|k| {
                        summarize(
                            &self
                                .values(m, k)
                                .iter()
                                .map(|v| 100.0 * v)
                                .collect::<Vec<_>>(),
                        )
                    })
                    .collect();
                (m.to_string(), cells)
            })
            .collect();
        format_method_table(&metrics, &rows)
    }

    /// Seed × method test accuracy grid with a closing `mean ± std` row.
    pub fn accuracy_grid(&self) -> String {
        let mut out = String::from("seed");
        for m in &self.methods {
            let _ = write!(out, "\t{m}");
        }
        out.push('\n');
        for &s in &self.seeds {
            let _ = write!(out, "{s}");
            for &m in &self.methods {
                match self
                    .cell(m, s)
                    .map(|c| c.test_accuracy)
                    .filter(|v| v.is_finite())
                {
                    Some(v) => {
                        let _ = write!(out, "\t{:.2}", 100.0 * v);
                    }
                    None => out.push_str("\tmissing"),
                }
            }
            out.push('\n');
        }
        out.push_str("mean ± std");
        for &m in &self.methods {
            let v: Vec<f64> = self
                .values(m, "test_accuracy")
                .iter()
                .map(|v| 100.0 * v)
                .collect();
            let _ = write!(out, "\t{}", summarize(&v));
        }
        out.push('\n');
        out
    }

    /// D statistics of every diagnosed cell.
    pub fn d_table(&self) -> String {
        let rows: Vec<(String, DStatistics)> = self
            .cells
            .iter()
            .filter_map(|c| {
                c.diagnostics
                    .as_ref()
                    .map(|d| (format!("{}/{}", c.method, c.seed), d.d.clone()))
            })
            .collect();
        format_d_table(&rows)
    }

    pub fn long_records(&self) -> Vec<LongRecord> {
        let mut out = Vec::new();
        for c in &self.cells {
            for m in METRICS {
                out.push(LongRecord {
                    method: c.method.to_string(),
                    seed: c.seed,
                    metric: m.to_string(),
                    value: c.metric(m),
                });
            }
        }
        out
    }

    pub fn failures(&self) -> Vec<(Method, u64, &str)> {
        self.cells
            .iter()
            .filter_map(|c| c.error.as_deref().map(|e| (c.method, c.seed, e)))
            .collect()
    }

    /// Writes the report files and a manifest into `dir`.
    pub fn write(&self, dir: &Path, config_text: &str) -> Result<RunManifest> {
        fs::create_dir_all(dir)?;
        let seed = self.seeds.first().copied().unwrap_or(0);
        let mut manifest = RunManifest::open(dir, config_text, seed)?;
        fs::write(dir.join("summary.tsv"), self.method_table())?;
        fs::write(dir.join("accuracy_grid.tsv"), self.accuracy_grid())?;
        fs::write(dir.join("d_stats.tsv"), self.d_table())?;
        write_long_format(&dir.join("results.tsv"), &self.long_records())?;
        let mut meta = String::from("method\tseed\tsample_id\n");
        let mut failures = String::from("method\tseed\terror\n");
        for c in &self.cells {
            for id in &c.meta_ids {
                let _ = writeln!(meta, "{}\t{}\t{id}", c.method, c.seed);
            }
            if let Some(e) = &c.error {
                let _ = writeln!(
                    failures,
                    "{}\t{}\t{}",
                    c.method,
                    c.seed,
                    e.replace(['\t', '\n'], " ")
                );
            }
        }
        fs::write(dir.join("meta_samples.tsv"), meta)?;
        fs::write(dir.join("failures.tsv"), failures)?;
        for f in [
            "summary.tsv",
            "accuracy_grid.tsv",
            "d_stats.tsv",
            "results.tsv",
            "meta_samples.tsv",
            "failures.tsv",
        ] {
            manifest.record_output(dir, f, "experiment")?;
        }
        manifest.save(dir)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::DatasetSpec;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        if let DatasetSpec::Toy(t) = &mut cfg.dataset {
            t.n = 200;
        }
        cfg.seeds = vec![3];
        cfg.methods = Method::ALL.to_vec();
        cfg.train.epochs = 3;
        cfg.train.batch_size = 20;
        cfg.selection.checkpoints = 2;
        cfg.selection.draws = 2;
        cfg.analysis.boundary_k = 20;
        cfg
    }

    #[test]
    fn every_method_runs_and_respects_the_budget() {
        let cfg = tiny();
        let report = run_experiment(&cfg).unwrap();
        assert!(report.failures().is_empty(), "{:?}", report.failures());
        for m in Method::ALL {
            let c = report.cell(m, 3).unwrap();
            assert_eq!(c.meta_ids.len(), 6, "{m}");
            assert!((0.0..=1.0).contains(&c.test_accuracy));
            let diagnosed = matches!(m, Method::Rbc | Method::Gbc);
            assert_eq!(c.diagnostics.is_some(), diagnosed, "{m}");
        }
        let warm: Vec<u64> =
            report.cell(Method::Random, 3).unwrap().meta_ids[..cfg.selection.m0].to_vec();
        for m in Method::ALL {
            assert!(warm
                .iter()
                .all(|id| report.cell(m, 3).unwrap().meta_ids.contains(id)));
        }
        assert!(report.cell(Method::Finetune, 3).unwrap().auc.is_nan());
        let d = report
            .cell(Method::Rbc, 3)
            .unwrap()
            .diagnostics
            .as_ref()
            .unwrap();
        assert!(d.msso <= d.mco * (1.0 + 1e-12));
        assert!(d.bound.holds);
    }

    #[test]
    fn single_seed_summary_has_zero_spread() {
        let mut cfg = tiny();
        cfg.methods = vec![Method::Random];
        let report = run_experiment(&cfg).unwrap();
        let s = report.summary(Method::Random, "test_accuracy");
        assert_eq!(s.n, 1);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.mean, report.cells[0].test_accuracy);
    }

    #[test]
    fn failed_seed_is_recorded_not_fatal() {
        let mut cfg = tiny();
        cfg.methods = vec![Method::Random];
        cfg.selection.budget = 500;
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.failures().len(), 1);
        assert!(report.accuracy_grid().contains("missing"));
    }
}
