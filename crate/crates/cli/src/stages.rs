use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use metasel::analysis::{
    evaluate_accuracy, mco_value, mco_value_weighted, msso_value, weight_quality, RunManifest,
};
use metasel::cluster::{
    candidate_and_meta_features, featurisation_epochs, pick_from_features, read_selection,
    round_seed, selected_indices, write_selection_records, SelectionRecord,
};
use metasel::data::{read_dataset, write_dataset, Dataset, Split};
use metasel::experiment::{
    base_dataset, baseline_meta, corrupt_dataset, diagnose, run_experiment, ExperimentConfig,
    Method,
};
use metasel::features::{features_for_layout, read_features, write_features};
use metasel::reweight::{finetune, load_artifacts, run_meta_reweighting, save_artifacts, warmup};
use metasel::Error;

const CLEAN: &str = "dataset.clean.tsv";
const DATASET: &str = "dataset.tsv";
const CORRUPTION: &str = "corruption.json";
const WARMUP: &str = "warmup";
const FEATURES: &str = "features.bin";
const FEATURIZE: &str = "featurize.json";
const SELECTION: &str = "selection.tsv";
const CLUSTERS: &str = "clusters.json";
const REWEIGHT: &str = "reweight";
const EVAL: &str = "eval.tsv";
const VERIFY: &str = "verify.tsv";

/// Relative tolerance of the objective identities checked by `verify`.
const IDENTITY_TOL: f64 = 1e-9;

#[derive(Debug, Serialize, Deserialize)]
struct FeaturizeInfo {
    method: Method,
    /// Leading candidate rows of the dump; the warm-up meta rows follow.
    candidates: usize,
    round_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterInfo {
    method: Method,
    /// Sample ids that were clustered.
    survivors: Vec<u64>,
    /// Empty for methods without weighted centroids.
    centroids: Vec<Vec<f64>>,
}

pub struct Stage {
    pub cfg: ExperimentConfig,
    pub text: String,
    pub seed: u64,
    pub out: PathBuf,
}

fn missing(path: &Path) -> Error {
    Error::MissingInput(path.to_path_buf())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(missing(path).into());
    }
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).with_context(|| format!("reading {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

impl Stage {
    pub fn load(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let (cfg, text) = match config {
            Some(path) => {
                if !path.exists() {
                    return Err(missing(path).into());
                }
                let text = fs::read_to_string(path)?;
                let mut cfg = ExperimentConfig::from_toml(&text)
                    .with_context(|| format!("config {}", path.display()))?;
                cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
                (cfg, text)
            }
            None => {
                let cfg = ExperimentConfig::default();
                let text = cfg.to_toml()?;
                (cfg, text)
            }
        };
        let seed = seed.unwrap_or(cfg.seeds[0]);
        let out = out
            .map(Path::to_path_buf)
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("metasel-out"));
        Ok(Stage {
            cfg,
            text,
            seed,
            out,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn manifest(&self) -> Result<RunManifest> {
        fs::create_dir_all(&self.out)?;
        Ok(RunManifest::open(&self.out, &self.text, self.seed)?)
    }

    /// `arg`, else the first clustering method of the config, else its first method.
    fn method(&self, arg: Option<&str>) -> Result<Method> {
        let clusters = |m: &&Method| matches!(m, Method::Rbc | Method::Gbc | Method::PlainKmeans);
        match arg {
            None => Ok(*self
                .cfg
                .methods
                .iter()
                .find(clusters)
                .unwrap_or(&self.cfg.methods[0])),
            Some(s) => Method::parse(s).with_context(|| format!("unknown method `{s}`")),
        }
    }

    fn dataset(&self, m: &mut RunManifest) -> Result<Dataset> {
        let path = self.path(DATASET);
        let ds = read_dataset(&path)?;
        m.record_input(DATASET, &path)?;
        Ok(ds)
    }

    pub fn gen_data(&self) -> Result<()> {
        let mut m = self.manifest()?;
        let ds = base_dataset(&self.cfg.dataset, self.seed)?;
        write_dataset(&self.path(CLEAN), &ds)?;
        m.record_output(&self.out, CLEAN, "gen-data")?;
        m.save(&self.out)?;
        println!(
            "{} samples, {} classes -> {}",
            ds.len(),
            ds.class_count,
            self.path(CLEAN).display()
        );
        Ok(())
    }

    pub fn corrupt(&self) -> Result<()> {
        let mut m = self.manifest()?;
        let clean_path = self.path(CLEAN);
        let clean = read_dataset(&clean_path)?;
        m.record_input(CLEAN, &clean_path)?;
        let (ds, report) = corrupt_dataset(&self.cfg, &clean, self.seed)?;
        write_dataset(&self.path(DATASET), &ds)?;
        write_json(&self.path(CORRUPTION), &report)?;
        m.record_output(&self.out, DATASET, "corrupt")?;
        m.record_output(&self.out, CORRUPTION, "corrupt")?;
        m.save(&self.out)?;
        match report {
            Some(r) => println!(
                "{} samples, realized noise {:.4}",
                ds.len(),
                r.realized_fraction
            ),
            None => println!("{} samples, no corruption", ds.len()),
        }
        Ok(())
    }

    pub fn warmup(&self) -> Result<()> {
        let mut m = self.manifest()?;
        let ds = self.dataset(&mut m)?;
        let run = warmup(
            &self.cfg.train_for(self.seed),
            &self.cfg.architecture,
            &ds,
            self.cfg.selection.m0,
            self.seed,
        )?;
        save_artifacts(&self.path(WARMUP), &run, &ds)?;
        m.record_tree(&self.out, WARMUP, "warmup")?;
        m.save(&self.out)?;
        let last = run.final_metrics();
        println!(
            "warm-up: {} meta samples, test accuracy {:.4}",
            run.meta.len(),
            last.test
        );
        Ok(())
    }

    pub fn featurize(&self, method: Option<&str>) -> Result<()> {
        let method = self.method(method)?;
        let mut m = self.manifest()?;
        let ds = self.dataset(&mut m)?;
        let warm = load_artifacts(&self.path(WARMUP), &ds)?;
        let sel = self.cfg.selection.selection_config(method, self.seed)?;
        let rs = round_seed(sel.seed, 1);
        let epochs = featurisation_epochs(&warm.checkpoints, sel.checkpoints, sel.sampling, rs)?;
        let taken: std::collections::HashSet<usize> = warm.meta.iter().copied().collect();
        let candidates: Vec<usize> = ds
            .training_pool()
            .into_iter()
            .filter(|i| !taken.contains(i))
            .collect();
        let feats = candidate_and_meta_features(
            &ds,
            &candidates,
            &warm.meta,
            &warm.checkpoints,
            &epochs,
            sel.feature_spec(),
            rs,
        )?;
        write_features(&self.path(FEATURES), &feats, &ds)?;
        let info = FeaturizeInfo {
            method,
            candidates: candidates.len(),
            round_seed: rs,
        };
        write_json(&self.path(FEATURIZE), &info)?;
        m.record_output(&self.out, FEATURES, "featurize")?;
        m.record_output(&self.out, FEATURIZE, "featurize")?;
        m.save(&self.out)?;
        println!(
            "{method}: {} x {} features from epochs {:?}",
            feats.len(),
            feats.layout.dim(),
            epochs
        );
        Ok(())
    }

    pub fn select(&self, method: Option<&str>) -> Result<()> {
        let method = self.method(method)?;
        let mut m = self.manifest()?;
        let ds = self.dataset(&mut m)?;
        let warm = load_artifacts(&self.path(WARMUP), &ds)?;
        let budget = self.cfg.selection.budget;
        let mut records: Vec<SelectionRecord> = warm
            .meta
            .iter()
            .map(|&i| SelectionRecord {
                round: 0,
                sample_id: ds.ids[i],
                cluster: None,
                similarity: None,
            })
            .collect();
        let mut info = ClusterInfo {
            method,
            survivors: Vec::new(),
            centroids: Vec::new(),
        };
        match method {
            Method::Rbc | Method::Gbc | Method::PlainKmeans => {
                let feats = read_features(&self.path(FEATURES), &ds)?;
                let done: FeaturizeInfo = read_json(&self.path(FEATURIZE))?;
                if done.method != method {
                    bail!(
                        "{FEATURES} holds {} features; run featurize --method {method}",
                        done.method
                    );
                }
                m.record_input(FEATURES, &self.path(FEATURES))?;
                let sel = self.cfg.selection.selection_config(method, self.seed)?;
                let want = budget.saturating_sub(warm.meta.len());
                if want > 0 {
                    let picks =
                        pick_from_features(&feats, done.candidates, want, &sel, done.round_seed)?;
                    for ((&i, &c), &s) in picks
                        .chosen
                        .iter()
                        .zip(&picks.clusters)
                        .zip(&picks.similarities)
                    {
                        records.push(SelectionRecord {
                            round: 1,
                            sample_id: ds.ids[i],
                            cluster: Some(c),
                            similarity: (!s.is_nan()).then_some(s),
                        });
                    }
                    info.survivors = picks.survivors.iter().map(|&i| ds.ids[i]).collect();
                    info.centroids = picks.centroids;
                }
            }
            _ => {
                let meta = baseline_meta(budget, &ds, &warm, method, self.seed)?;
                records.extend(meta[warm.meta.len()..].iter().map(|&i| SelectionRecord {
                    round: 1,
                    sample_id: ds.ids[i],
                    cluster: None,
                    similarity: None,
                }));
            }
        }
        write_selection_records(&self.path(SELECTION), &records)?;
        write_json(&self.path(CLUSTERS), &info)?;
        m.record_output(&self.out, SELECTION, "select")?;
        m.record_output(&self.out, CLUSTERS, "select")?;
        m.save(&self.out)?;
        println!("{method}: {} meta samples", records.len());
        Ok(())
    }

    pub fn reweight(&self) -> Result<()> {
        let mut m = self.manifest()?;
        let ds = self.dataset(&mut m)?;
        let records = read_selection(&self.path(SELECTION))?;
        let info: ClusterInfo = read_json(&self.path(CLUSTERS))?;
        m.record_input(SELECTION, &self.path(SELECTION))?;
        let meta = selected_indices(&records, &ds)?;
        let train = self.cfg.train_for(self.seed);
        let run = if info.method == Method::Finetune {
            let warm = load_artifacts(&self.path(WARMUP), &ds)?;
            finetune(&train, warm.params, &ds, &meta)?
        } else {
            run_meta_reweighting(&train, &self.cfg.architecture, &ds, &meta)?
        };
        save_artifacts(&self.path(REWEIGHT), &run, &ds)?;
        m.record_tree(&self.out, REWEIGHT, "reweight")?;
        m.save(&self.out)?;
        println!(
            "{}: test accuracy {:.4}",
            info.method,
            run.final_metrics().test
        );
        Ok(())
    }

    pub fn eval(&self) -> Result<()> {
        let mut m = self.manifest()?;
        let ds = self.dataset(&mut m)?;
        let run = load_artifacts(&self.path(REWEIGHT), &ds)?;
        let mut rows = vec![
            (
                "test_accuracy",
                evaluate_accuracy(&run.params, &ds, Split::Test)?,
            ),
            (
                "validation_accuracy",
                evaluate_accuracy(&run.params, &ds, Split::Validation)?,
            ),
        ];
        if !run.trajectory.is_empty() {
            let weights = &run.final_weights().w;
            match weight_quality(
                &run.params,
                &ds,
                &run.pool,
                weights,
                self.cfg.analysis.boundary_k,
            ) {
                Ok(q) => rows.extend([("auc", q.auc_all), ("auc_boundary", q.auc_boundary)]),
                // A pool with a single class (no corruption) has no AUC.
                Err(Error::InvalidArgument(_)) => {
                    rows.extend([("auc", f64::NAN), ("auc_boundary", f64::NAN)])
                }
                Err(e) => return Err(e.into()),
            }
        }
        let mut text = String::from("metric\tvalue\n");
        for (k, v) in &rows {
            let _ = writeln!(text, "{k}\t{v:.6}");
        }
        fs::write(self.path(EVAL), &text)?;
        m.record_output(&self.out, EVAL, "eval")?;
        m.save(&self.out)?;
        print!("{text}");
        Ok(())
    }

    /// Returns whether every check passed.
    pub fn verify(&self) -> Result<bool> {
        let mut m = self.manifest()?;
        let ds = self.dataset(&mut m)?;
        let warm = load_artifacts(&self.path(WARMUP), &ds)?;
        let feats = read_features(&self.path(FEATURES), &ds)?;
        let info: ClusterInfo = read_json(&self.path(CLUSTERS))?;
        if info.centroids.is_empty() {
            bail!(
                "{} kept no weighted centroids; verify needs an rbc or gbc selection",
                info.method
            );
        }
        let dim = info.centroids[0].len();
        let flat: Vec<f64> = info.centroids.iter().flatten().copied().collect();
        let centroids =
            Array2::from_shape_vec((info.centroids.len(), dim), flat).context("centroid shape")?;

        let by_id: HashMap<u64, usize> =
            ds.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let row_of: HashMap<usize, usize> = feats
            .rows
            .iter()
            .enumerate()
            .map(|(r, &i)| (i, r))
            .collect();
        let mut survivors = Vec::with_capacity(info.survivors.len());
        let mut rows = Vec::with_capacity(info.survivors.len());
        for id in &info.survivors {
            let i = *by_id
                .get(id)
                .with_context(|| format!("sample id {id} not in the dataset"))?;
            rows.push(
                *row_of
                    .get(&i)
                    .with_context(|| format!("sample id {id} has no feature row"))?,
            );
            survivors.push(i);
        }
        let lf = feats.data.select(Axis(0), &rows);

        let mut checks: Vec<(&str, String, Option<bool>)> = Vec::new();
        let replay = features_for_layout(
            &ds,
            &survivors,
            Some(&ds.observed(&survivors)),
            &warm.checkpoints,
            &feats.layout,
            feats.layout.mode,
        )?;
        let drift = (&replay.data - &lf)
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        checks.push(("feature_replay", format!("{drift:e}"), Some(drift <= 1e-12)));

        let mco = mco_value(lf.view(), centroids.view())?;
        let weighted = mco_value_weighted(lf.view(), centroids.view())?;
        let gap = (mco - weighted).abs();
        checks.push((
            "mco_dual_forms",
            format!("{mco:.6e} {weighted:.6e}"),
            Some(gap <= IDENTITY_TOL * mco.max(1.0)),
        ));
        let msso = msso_value(lf.view(), centroids.view())?;
        checks.push((
            "msso_le_mco",
            format!("{msso:.6e} {mco:.6e}"),
            Some(msso <= mco * (1.0 + IDENTITY_TOL)),
        ));

        let diag = diagnose(
            &ds,
            &warm.checkpoints,
            &feats.layout,
            &survivors,
            centroids.view(),
        )?;
        let t = diag.bound;
        checks.push((
            "bound",
            format!("{:.6} {:.6}", t.lower, t.ratio),
            Some(t.holds),
        ));
        checks.push((
            "dominance_assumption",
            format!("{}", t.assumption_holds),
            None,
        ));
        checks.push(("d_min", format!("{:.6}", diag.d.min), None));
        checks.push(("d_quantile_5", format!("{:.6}", diag.d.quantile_5), None));
        checks.push((
            "d_infinite",
            format!("{}/{}", diag.d.infinite, diag.d.count),
            None,
        ));
        checks.push((
            "stable_samples",
            format!("{}/{}", diag.stable, diag.candidates),
            None,
        ));

        let mut text = String::from("check\tvalue\tstatus\n");
        for (name, value, ok) in &checks {
            let status = match ok {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "info",
            };
            let _ = writeln!(text, "{name}\t{value}\t{status}");
        }
        fs::write(self.path(VERIFY), &text)?;
        m.record_input(FEATURES, &self.path(FEATURES))?;
        m.record_output(&self.out, VERIFY, "verify")?;
        m.save(&self.out)?;
        print!("{text}");
        Ok(checks.iter().all(|c| c.2 != Some(false)))
    }

    pub fn experiment(&self, only_seed: Option<u64>) -> Result<()> {
        let mut cfg = self.cfg.clone();
        if let Some(s) = only_seed {
            cfg.seeds = vec![s];
        }
        let report = run_experiment(&cfg)?;
        report.write(&self.out, &self.text)?;
        print!("{}", report.method_table());
        for (method, seed, err) in report.failures() {
            eprintln!("{method} seed {seed} failed: {err}");
        }
        Ok(())
    }
}
