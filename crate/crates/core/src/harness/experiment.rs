//! Config-driven experiments: train, optionally design ensemble weights,
//! certify the test split, and write the result artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ensemble::{estimate_margin_stats, compute_weight, EnsembleSpec, WeightDesign, WeightMode};
use crate::error::{Error, Result};
use crate::harness::dataset::{make_dataset, Dataset, DatasetSpec};
use crate::harness::eval::{
    certified_accuracy_table, certify_dataset, evaluate_acr, parse_grid, run_indexed, AccuracyAtRadius, Certifier,
    EvalRecord,
};
use crate::harness::report::{svg_plot, table_csv, write_records};
use crate::model::{ModelParams, Provenance};
use crate::smoothing::SmoothingConfig;
use crate::stats::RngStream;
use crate::train::{train, TrainConfig};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TABLE_FILE: &str = "certified_accuracy.csv";
pub const PLOT_FILE: &str = "certified_accuracy.svg";
pub const MODEL_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub train_data: Option<String>,
    pub test_data: String,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub ensemble: Option<EnsembleSection>,
    #[serde(default)]
    pub certify: SmoothingConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_grid_spec")]
    pub grid: String,
    /// Certify only the first points of the test split.
    #[serde(default)]
    pub max_test_points: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    /// Checkpoints, relative to the config file. A model trained by the same
    /// experiment is appended as the last component.
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default = "fixed")]
    pub weight_mode: WeightMode,
    #[serde(default)]
    pub alg2: Option<WeightDesign>,
    /// Training points used to design fixed two-model weights.
    #[serde(default = "default_design_points")]
    pub design_points: usize,
}

fn one() -> usize {
    1
}

fn fixed() -> WeightMode {
    WeightMode::Fixed
}

fn default_design_points() -> usize {
    20
}

fn default_grid_spec() -> String {
    "0:2:0.25".into()
}

fn prefixed(prefix: &str, err: Error) -> Error {
    match err {
        Error::Config { path, message } => Error::config(format!("{prefix}.{path}"), message),
        other => other,
    }
}

impl ExperimentConfig {
    /// Parses a config, reporting schema violations with their field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without doing real work.
    pub fn validate(&self, base: &Path) -> Result<()> {
        DatasetSpec::parse(&self.test_data).map_err(|e| prefixed("test_data", e))?;
        if let Some(spec) = &self.train_data {
            DatasetSpec::parse(spec).map_err(|e| prefixed("train_data", e))?;
        }
        self.certify.validate().map_err(|e| prefixed("certify", e))?;
        parse_grid(&self.grid)?;
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if self.max_test_points == Some(0) {
            return Err(Error::config("max_test_points", "must be at least 1"));
        }
        if let Some(t) = &self.train {
            t.validate().map_err(|e| prefixed("train", e))?;
            if self.train_data.is_none() {
                return Err(Error::config("train_data", "required when `train` is present"));
            }
        }
        let Some(ens) = &self.ensemble else {
            if self.train.is_none() {
                return Err(Error::config("train", "either `train` or `ensemble` is required"));
            }
            return Ok(());
        };
        let k = ens.checkpoints.len() + usize::from(self.train.is_some());
        if k == 0 {
            return Err(Error::config("ensemble.checkpoints", "the ensemble has no components"));
        }
        for (i, p) in ens.checkpoints.iter().enumerate() {
            if !base.join(p).is_file() {
                return Err(Error::config(
                    format!("ensemble.checkpoints[{i}]"),
                    format!("no such file {}", base.join(p).display()),
                ));
            }
        }
        if let Some(w) = &ens.weights {
            if w.len() != k {
                return Err(Error::config("ensemble.weights", format!("{} weights for {k} components", w.len())));
            }
            if w.iter().any(|v| !(*v >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
                return Err(Error::config("ensemble.weights", "must be nonnegative with positive sum"));
            }
        }
        if let Some(d) = &ens.alg2 {
            d.validate().map_err(|e| prefixed("ensemble", e))?;
        }
        let designs = ens.weight_mode == WeightMode::PerPoint || (ens.weights.is_none() && ens.alg2.is_some());
        if designs {
            if k != 2 {
                return Err(Error::config("ensemble.weight_mode", "weight design needs exactly two components"));
            }
            if ens.alg2.is_none() {
                return Err(Error::config("ensemble.alg2", "required for per_point weights"));
            }
        }
        if ens.weight_mode == WeightMode::Fixed && ens.weights.is_none() && ens.alg2.is_some() {
            if self.train_data.is_none() {
                return Err(Error::config("train_data", "needed to design fixed ensemble weights"));
            }
            if ens.design_points == 0 {
                return Err(Error::config("ensemble.design_points", "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentInfo {
    pub source: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WallTimes {
    pub train: f64,
    pub weight_design: f64,
    pub certify: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acr: f64,
    pub clean_accuracy: f64,
    pub points: usize,
    pub sigma: f64,
    pub certified_accuracy: Vec<AccuracyAtRadius>,
    pub components: Vec<ComponentInfo>,
    pub weights: Option<Vec<f64>>,
    pub weight_mode: Option<WeightMode>,
    pub wall_times: WallTimes,
}

/// Mean of the per-point optimal `w1` over the first `points` rows of
/// `data`, using their labels.
pub fn design_fixed_weights(
    f1: &ModelParams,
    f2: &ModelParams,
    data: &Dataset,
    design: &WeightDesign,
    points: usize,
    seed: u64,
    workers: usize,
) -> Result<(f64, f64)> {
    let count = points.min(data.len());
    if count == 0 {
        return Err(Error::InvalidArgument("no points for weight design".into()));
    }
    let root = RngStream::new(seed);
    let w1s = run_indexed(count, workers, |i| {
        let stats = estimate_margin_stats(f1, f2, data.point(i), data.labels()[i], design, &root.child(i as u64))?;
        Ok(compute_weight(&stats).0)
    })?;
    let w1 = w1s.iter().sum::<f64>() / count as f64;
    Ok((w1, 1.0 - w1))
}

/// Writes records, timings, summary, CSV table, and SVG plot into `out`.
pub fn write_artifacts(out: &Path, records: &[EvalRecord], grid: &[f64], mut summary: Summary) -> Result<Summary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let acr = evaluate_acr(records)?;
    let table = certified_accuracy_table(records, grid);
    summary.acr = acr.acr;
    summary.clean_accuracy = acr.clean_accuracy;
    summary.points = records.len();
    summary.certified_accuracy = table.clone();

    write_records(&out.join(RECORDS_FILE), records)?;
    let mut timings = String::new();
    for r in records {
        timings.push_str(&serde_json::to_string(&serde_json::json!({"index": r.index, "seconds": r.seconds}))?);
        timings.push('\n');
    }
    let write = |name: &str, text: String| {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    };
    write(TIMINGS_FILE, timings)?;
    write(TABLE_FILE, table_csv(&table))?;
    write(PLOT_FILE, svg_plot(&[("certified accuracy".to_string(), table)]))?;
    write(SUMMARY_FILE, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Empty summary carrying the run metadata; filled in by [`write_artifacts`].
pub fn summary_shell(sigma: f64, components: Vec<ComponentInfo>, weights: Option<Vec<f64>>, weight_mode: Option<WeightMode>) -> Summary {
    Summary {
        acr: 0.0,
        clean_accuracy: 0.0,
        points: 0,
        sigma,
        certified_accuracy: Vec::new(),
        components,
        weights,
        weight_mode,
        wall_times: WallTimes::default(),
    }
}

/// Runs the experiment described by the config file at `config_path`.
pub fn run_experiment(config_path: &Path, out: &Path) -> Result<Summary> {
    let cfg = ExperimentConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    run_config(&cfg, base, out)
}

pub fn run_config(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<Summary> {
    cfg.validate(base)?;
    let start = Instant::now();
    let grid = parse_grid(&cfg.grid)?;
    let mut test = make_dataset(&cfg.test_data)?;
    if let Some(n) = cfg.max_test_points {
        test = test.truncated(n)?;
    }
    let train_data = cfg.train_data.as_deref().map(make_dataset).transpose()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut components: Vec<(String, Arc<ModelParams>)> = Vec::new();
    if let Some(ens) = &cfg.ensemble {
        for p in &ens.checkpoints {
            let path = base.join(p);
            components.push((path.display().to_string(), Arc::new(ModelParams::load(&path)?)));
        }
    }
    let mut times = WallTimes::default();
    if let (Some(tc), Some(data)) = (&cfg.train, &train_data) {
        let t0 = Instant::now();
        let (model, _) = train(data, tc)?;
        let path = out.join(MODEL_FILE);
        model.save(&path)?;
        components.push((path.display().to_string(), Arc::new(model)));
        times.train = t0.elapsed().as_secs_f64();
    }
    let info: Vec<ComponentInfo> = components
        .iter()
        .map(|(source, m)| ComponentInfo {
            source: source.clone(),
            provenance: m.provenance.clone(),
        })
        .collect();
    let models: Vec<Arc<ModelParams>> = components.into_iter().map(|(_, m)| m).collect();

    let t0 = Instant::now();
    let (certifier, weights, mode) = match &cfg.ensemble {
        None => (Certifier::Model(models[0].clone()), None, None),
        Some(ens) => match ens.weight_mode {
            WeightMode::PerPoint => (
                Certifier::PerPoint {
                    models: [models[0].clone(), models[1].clone()],
                    design: ens.alg2.clone().expect("validated"),
                },
                None,
                Some(WeightMode::PerPoint),
            ),
            WeightMode::Fixed => {
                let spec = match (&ens.weights, &ens.alg2) {
                    (Some(w), _) => EnsembleSpec::normalized(models.clone(), w)?,
                    (None, Some(design)) => {
                        let data = train_data.as_ref().expect("validated");
                        let (w1, w2) =
                            design_fixed_weights(&models[0], &models[1], data, design, ens.design_points, cfg.seed, cfg.workers)?;
                        EnsembleSpec::new(models.clone(), vec![w1, w2])?
                    }
                    (None, None) => EnsembleSpec::uniform(models.clone())?,
                };
                let w = spec.weights().to_vec();
                (Certifier::Ensemble(spec), Some(w), Some(WeightMode::Fixed))
            }
        },
    };
    times.weight_design = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let records = certify_dataset(&certifier, &test, &cfg.certify, cfg.seed, cfg.workers)?;
    times.certify = t0.elapsed().as_secs_f64();
    times.total = start.elapsed().as_secs_f64();

    let mut summary = summary_shell(cfg.certify.sigma, info, weights, mode);
    summary.wall_times = times;
    write_artifacts(out, &records, &grid, summary)
}
