//! Per-point certification over a dataset and the ACR / certified-accuracy
//! summaries computed from it.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{per_point_weights, EnsembleSpec, WeightDesign};
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::model::ModelParams;
use crate::smoothing::{certify, CertificationResult, SmoothingConfig};
use crate::stats::RngStream;

/// Stream child of a point reserved for per-point weight design; certify
/// itself uses children 0 and 1.
const WEIGHT_PATH: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub label: usize,
    pub prediction: Option<usize>,
    /// Certified radius, forced to 0 when the point is misclassified or
    /// abstained.
    pub radius: f64,
    pub abstain: bool,
    pub correct: bool,
    pub counts: Vec<u64>,
    /// Wall time; not serialized so record files are reproducible.
    #[serde(skip, default)]
    pub seconds: f64,
}

impl EvalRecord {
    pub fn from_certification(index: usize, label: usize, result: CertificationResult) -> Self {
        let correct = result.prediction == Some(label);
        EvalRecord {
            index,
            label,
            prediction: result.prediction,
            radius: if correct { result.radius } else { 0.0 },
            abstain: result.abstained(),
            correct,
            counts: result.counts,
            seconds: result.elapsed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcrSummary {
    pub acr: f64,
    pub clean_accuracy: f64,
}

/// Mean radius over all records and the fraction classified correctly.
pub fn evaluate_acr(records: &[EvalRecord]) -> Result<AcrSummary> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no evaluation records".into()));
    }
    let n = records.len() as f64;
    Ok(AcrSummary {
        acr: records.iter().map(|r| r.radius).sum::<f64>() / n,
        clean_accuracy: records.iter().filter(|r| r.correct).count() as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyAtRadius {
    pub radius: f64,
    pub accuracy: f64,
}

/// `{0, 0.25, ..., 2.0}`.
pub fn default_grid() -> Vec<f64> {
    (0..=8).map(|i| i as f64 * 0.25).collect()
}

/// Parses `start:stop:step` (inclusive of `stop` up to rounding).
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = |msg: &str| Error::config("grid", format!("{msg}: {text:?}"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("expected start:stop:step"))?;
    let [start, stop, step] = parts[..] else {
        return Err(bad("expected start:stop:step"));
    };
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
        return Err(bad("need step > 0 and stop >= start"));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize;
    if count > 100_000 {
        return Err(bad("too many grid points"));
    }
    Ok((0..=count).map(|i| start + i as f64 * step).collect())
}

/// Fraction of records that are correct with `R_i >= r`, for each `r`.
pub fn certified_accuracy_table(records: &[EvalRecord], grid: &[f64]) -> Vec<AccuracyAtRadius> {
    let n = records.len().max(1) as f64;
    grid.iter()
        .map(|&r| AccuracyAtRadius {
            radius: r,
            accuracy: records.iter().filter(|rec| rec.correct && rec.radius >= r).count() as f64 / n,
        })
        .collect()
}

/// What gets smoothed at each test point.
#[derive(Clone, Debug)]
pub enum Certifier {
    Model(Arc<ModelParams>),
    Ensemble(EnsembleSpec),
    /// Two-model ensemble with weights designed afresh at every point.
    PerPoint {
        models: [Arc<ModelParams>; 2],
        design: WeightDesign,
    },
}

impl Certifier {
    pub fn input_dim(&self) -> usize {
        match self {
            Certifier::Model(m) => m.input_dim(),
            Certifier::Ensemble(e) => e.components()[0].input_dim(),
            Certifier::PerPoint { models, .. } => models[0].input_dim(),
        }
    }

    pub fn certify_point(&self, x: &[f64], cfg: &SmoothingConfig, stream: &RngStream) -> Result<CertificationResult> {
        match self {
            Certifier::Model(m) => certify(m.as_ref(), x, cfg, stream),
            Certifier::Ensemble(e) => certify(e, x, cfg, stream),
            Certifier::PerPoint { models, design } => {
                let (w1, w2) = per_point_weights(&models[0], &models[1], x, design, &stream.child(WEIGHT_PATH))?;
                let spec = EnsembleSpec::new(models.to_vec(), vec![w1, w2])?;
                certify(&spec, x, cfg, stream)
            }
        }
    }
}

/// Runs `f(i)` for `i in 0..n` on a pool of `workers` threads and returns
/// the results in index order.
pub fn run_indexed<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if workers == 0 {
        return Err(Error::InvalidArgument("workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Certifies every point of `data`; point `i` draws from
/// `RngStream::new(seed).child(i)`, so results do not depend on `workers`.
pub fn certify_dataset(
    certifier: &Certifier,
    data: &Dataset,
    cfg: &SmoothingConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    if certifier.input_dim() != data.dim() {
        return Err(Error::shape(
            "certify_dataset",
            format!("model expects {} features, data has {}", certifier.input_dim(), data.dim()),
        ));
    }
    let root = RngStream::new(seed);
    run_indexed(data.len(), workers, |i| {
        let result = certifier.certify_point(data.point(i), cfg, &root.child(i as u64))?;
        Ok(EvalRecord::from_certification(i, data.labels()[i], result))
    })
}
