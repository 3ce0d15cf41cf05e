//! Weighted soft ensembles smoothed as a single base classifier, the margin
//! variance analysis behind them, and optimal two-model weight design.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::smoothing::{certify, noisy_copies, BaseClassifier, CertificationResult, SmoothingConfig};
use crate::stats::RngStream;
use crate::tensor::{argmax, Tensor};

/// Floor applied to the margin means before inverting them.
pub const MARGIN_FLOOR: f64 = 1e-3;

const PERTURB_PATH: u64 = 0;
const INPUT_PATH: u64 = 1;

#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    components: Vec<Arc<ModelParams>>,
    weights: Vec<f64>,
}

impl EnsembleSpec {
    pub fn new(components: Vec<Arc<ModelParams>>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("an ensemble needs at least one component".into()));
        }
        if components.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} components but {} weights",
                components.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("weights must be nonnegative: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        let (d, c) = (components[0].input_dim(), components[0].num_classes());
        if components.iter().any(|m| m.input_dim() != d || m.num_classes() != c) {
            return Err(Error::InvalidArgument(
                "components disagree on input dim or class count".into(),
            ));
        }
        Ok(EnsembleSpec { components, weights })
    }

    /// Scales nonnegative raw weights to sum to one.
    pub fn normalized(components: Vec<Arc<ModelParams>>, raw: &[f64]) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument(format!("weights {raw:?} have no positive mass")));
        }
        Self::new(components, raw.iter().map(|w| w / total).collect())
    }

    pub fn uniform(components: Vec<Arc<ModelParams>>) -> Result<Self> {
        let k = components.len().max(1);
        Self::new(components, vec![1.0 / k as f64; k])
    }

    pub fn components(&self) -> &[Arc<ModelParams>] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ_l w_l F^l(x)` for each row of `x`.
    pub fn ensemble_soft(&self, x: &Tensor) -> Result<Tensor> {
        let mut acc: Option<Vec<f64>> = None;
        for (model, &w) in self.components.iter().zip(&self.weights) {
            let p = model.forward_soft(x)?;
            match &mut acc {
                None => acc = Some(p.data().iter().map(|v| w * v).collect()),
                Some(a) => a.iter_mut().zip(p.data()).for_each(|(a, v)| *a += w * v),
            }
        }
        let data = acc.expect("nonempty ensemble");
        Tensor::matrix(x.rows(), self.num_classes(), data)
    }
}

impl BaseClassifier for EnsembleSpec {
    fn input_dim(&self) -> usize {
        self.components[0].input_dim()
    }

    fn num_classes(&self) -> usize {
        self.components[0].num_classes()
    }

    fn classify(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let p = self.ensemble_soft(inputs)?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
    }
}

/// CERTIFY applied to the hard ensemble `argmax Σ w_l F^l`.
pub fn ensemble_certify(
    spec: &EnsembleSpec,
    x: &[f64],
    cfg: &SmoothingConfig,
    stream: &RngStream,
) -> Result<CertificationResult> {
    certify(spec, x, cfg, stream)
}

/// Diagonal of `Var(Σ w_l z^l) = Σ w_l² Var(z^l) + 2 Σ_{l<m} w_l w_m Cov(z^l, z^m)`.
///
/// `cov` holds one entry per unordered pair; either key order is accepted.
pub fn variance_of_ensemble(
    var: &[Vec<f64>],
    cov: &HashMap<(usize, usize), Vec<f64>>,
    weights: &[f64],
) -> Result<Vec<f64>> {
    let k = var.len();
    if k == 0 || weights.len() != k {
        return Err(Error::InvalidArgument(format!("{k} variances for {} weights", weights.len())));
    }
    let c = var[0].len();
    if var.iter().any(|v| v.len() != c) {
        return Err(Error::InvalidArgument("variance vectors differ in length".into()));
    }
    let mut out = vec![0.0; c];
    for (v, &w) in var.iter().zip(weights) {
        out.iter_mut().zip(v).for_each(|(o, vi)| *o += w * w * vi);
    }
    for l in 0..k {
        for m in l + 1..k {
            let pair = cov
                .get(&(l, m))
                .or_else(|| cov.get(&(m, l)))
                .ok_or_else(|| Error::InvalidArgument(format!("missing covariance for pair ({l}, {m})")))?;
            if pair.len() != c {
                return Err(Error::InvalidArgument(format!("covariance ({l}, {m}) has wrong length")));
            }
            let scale = 2.0 * weights[l] * weights[m];
            out.iter_mut().zip(pair).for_each(|(o, cv)| *o += scale * cv);
        }
    }
    Ok(out)
}

/// Equal-weight variance bound `β + (α − β) / k` when every component
/// variance is at most `α` and every cross-covariance at most `β`.
pub fn averaged_variance_bound(alpha: f64, beta: f64, k: usize) -> f64 {
    beta + (alpha - beta) / k as f64
}

/// `1 − Σ_{i≠label} varbar_i / e_i²`; may be negative.
pub fn p1_lower_bound(varbar: &[f64], e: &[f64], label: usize) -> Result<f64> {
    if varbar.len() != e.len() || label >= e.len() {
        return Err(Error::InvalidArgument("p1_lower_bound: inconsistent lengths".into()));
    }
    let mut total = 0.0;
    for (i, (&v, &ei)) in varbar.iter().zip(e).enumerate() {
        if i == label {
            continue;
        }
        if !(ei > 0.0) {
            return Err(Error::InvalidArgument(format!("margin floor e_{i} = {ei} must be positive")));
        }
        total += v / (ei * ei);
    }
    Ok(1.0 - total)
}

/// Copy of `params` where each scalar is, with probability `t`, shifted by
/// `N(0, sigma_tilde²)` noise.
pub fn perturb_model(params: &ModelParams, t: f64, sigma_tilde: f64, stream: &RngStream) -> Result<ModelParams> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t must be in [0, 1], got {t}")));
    }
    if !(sigma_tilde >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_tilde must be >= 0, got {sigma_tilde}")));
    }
    if t == 0.0 || sigma_tilde == 0.0 {
        return Ok(params.clone());
    }
    let mut rng = stream.rng();
    let perturbed = params
        .tensors()
        .map(|tensor| {
            let data = tensor
                .data()
                .iter()
                .map(|&v| {
                    if rng.random::<f64>() < t {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + sigma_tilde * z
                    } else {
                        v
                    }
                })
                .collect();
            Tensor::new(tensor.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    params.with_values(perturbed)
}

/// Empirical margin statistics for two models at one query point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub label: usize,
    pub zbar1: Vec<f64>,
    pub zbar2: Vec<f64>,
    /// `Var(z¹)_ii`
    pub b: Vec<f64>,
    /// `2 Cov(z¹, z²)_ii`
    pub c: Vec<f64>,
    /// `Var(z²)_ii`
    pub d: Vec<f64>,
    /// `max(min(z̄¹_i, z̄²_i), MARGIN_FLOOR)^-2`
    pub a: Vec<f64>,
    pub m: usize,
    pub n: usize,
}

impl MarginStats {
    /// Builds the statistics from paired margin samples (`z1[j]` and `z2[j]`
    /// share noise draw `j`).
    pub fn from_samples(z1: &[Vec<f64>], z2: &[Vec<f64>], label: usize, m: usize, n: usize) -> Result<Self> {
        if z1.is_empty() || z1.len() != z2.len() {
            return Err(Error::InvalidArgument(format!(
                "need equal nonzero sample counts, got {} and {}",
                z1.len(),
                z2.len()
            )));
        }
        let classes = z1[0].len();
        if z1.iter().chain(z2).any(|z| z.len() != classes) || label >= classes {
            return Err(Error::InvalidArgument("margin vectors have inconsistent lengths".into()));
        }
        let count = z1.len() as f64;
        let mean = |zs: &[Vec<f64>]| -> Vec<f64> {
            let mut acc = vec![0.0; classes];
            for z in zs {
                acc.iter_mut().zip(z).for_each(|(a, v)| *a += v);
            }
            acc.iter().map(|a| a / count).collect()
        };
        let zbar1 = mean(z1);
        let zbar2 = mean(z2);
        let (mut s11, mut s12, mut s22) = (vec![0.0; classes], vec![0.0; classes], vec![0.0; classes]);
        for (p, q) in z1.iter().zip(z2) {
            for i in 0..classes {
                let (u, v) = (p[i] - zbar1[i], q[i] - zbar2[i]);
                s11[i] += u * u;
                s12[i] += u * v;
                s22[i] += v * v;
            }
        }
        let b: Vec<f64> = s11.iter().map(|s| s / count).collect();
        let c: Vec<f64> = s12.iter().map(|s| 2.0 * (s / count)).collect();
        let d: Vec<f64> = s22.iter().map(|s| s / count).collect();
        let a = zbar1
            .iter()
            .zip(&zbar2)
            .map(|(p, q)| p.min(*q).max(MARGIN_FLOOR).powi(-2))
            .collect();
        Ok(MarginStats {
            label,
            zbar1,
            zbar2,
            b,
            c,
            d,
            a,
            m,
            n,
        })
    }

    /// `q(w) = Σ_{i≠y} a_i (b_i w1² + c_i w1 w2 + d_i w2²)` evaluated directly.
    pub fn surrogate(&self, w1: f64) -> f64 {
        let w2 = 1.0 - w1;
        self.classes()
            .map(|i| self.a[i] * (self.b[i] * w1 * w1 + self.c[i] * w1 * w2 + self.d[i] * w2 * w2))
            .sum()
    }

    fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.a.len()).filter(move |&i| i != self.label)
    }

    /// Coefficients of `q(w1) = A w1² + B w1 + C` after substituting
    /// `w2 = 1 − w1`.
    pub fn coefficients(&self) -> Quadratic {
        let mut q = Quadratic { a: 0.0, b: 0.0, c: 0.0 };
        for i in self.classes() {
            let (ai, bi, ci, di) = (self.a[i], self.b[i], self.c[i], self.d[i]);
            q.a += ai * (bi - ci + di);
            q.b += ai * (ci - 2.0 * di);
            q.c += ai * di;
        }
        q
    }
}

/// `A w² + B w + C`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Quadratic {
    pub fn eval(&self, w: f64) -> f64 {
        (self.a * w + self.b) * w + self.c
    }

    /// Minimizer over `[0, 1]`: the vertex when it is a strict minimum inside
    /// the interval, otherwise `0` if `A + B > 0` and `1` if not.
    pub fn argmin_unit(&self) -> f64 {
        if self.a > 0.0 {
            let vertex = -self.b / (2.0 * self.a);
            if (0.0..=1.0).contains(&vertex) {
                return vertex;
            }
        }
        if self.a + self.b > 0.0 {
            0.0
        } else {
            1.0
        }
    }
}

/// Optimal two-model weights `(w1, w2)` for the given statistics.
pub fn compute_weight(stats: &MarginStats) -> (f64, f64) {
    let w1 = stats.coefficients().argmin_unit();
    (w1, 1.0 - w1)
}

/// Parameters of the perturbation-based weight estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightDesign {
    /// Perturbed copies per model.
    pub m: usize,
    /// Noisy inputs per query point.
    pub n: usize,
    /// Fraction of parameters perturbed.
    pub t: f64,
    pub sigma: f64,
    pub sigma_tilde: f64,
}

impl Default for WeightDesign {
    fn default() -> Self {
        WeightDesign {
            m: 10,
            n: 10,
            t: 0.3,
            sigma: 0.25,
            sigma_tilde: 0.01,
        }
    }
}

impl WeightDesign {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::config("alg2.m", "m and n must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::config("alg2.t", format!("must be in [0, 1], got {}", self.t)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("alg2.sigma", "must be positive"));
        }
        if !(self.sigma_tilde >= 0.0) {
            return Err(Error::config("alg2.sigma_tilde", "must be >= 0"));
        }
        Ok(())
    }
}

/// Perturbs both models `m` times, draws `n` noisy copies of `x`, and
/// collects the label-relative margins `F(x_j)_y · 1 − F(x_j)`.
pub fn estimate_margin_stats(
    f1: &ModelParams,
    f2: &ModelParams,
    x: &[f64],
    y: usize,
    design: &WeightDesign,
    stream: &RngStream,
) -> Result<MarginStats> {
    design.validate()?;
    if y >= f1.num_classes() {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    let inputs = noisy_copies(x, design.n, design.sigma, &stream.child(INPUT_PATH));
    let margins = |model: &ModelParams, which: u64| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(design.m * design.n);
        for j in 0..design.m {
            let s = stream.child(PERTURB_PATH).child(which).child(j as u64);
            let perturbed = perturb_model(model, design.t, design.sigma_tilde, &s)?;
            let probs = perturbed.forward_soft(&inputs)?;
            for r in 0..probs.rows() {
                let row = probs.row(r);
                out.push(row.iter().map(|p| row[y] - p).collect());
            }
        }
        Ok(out)
    };
    let z1 = margins(f1, 0)?;
    let z2 = margins(f2, 1)?;
    MarginStats::from_samples(&z1, &z2, y, design.m, design.n)
}

/// Per-query weights. The margin label is the class the uniform ensemble
/// predicts at the clean input, so no ground truth is consulted.
pub fn per_point_weights(
    f1: &ModelParams,
    f2: &ModelParams,
    x: &[f64],
    design: &WeightDesign,
    stream: &RngStream,
) -> Result<(f64, f64)> {
    let row = Tensor::matrix(1, x.len(), x.to_vec())?;
    let p1 = f1.forward_soft(&row)?;
    let p2 = f2.forward_soft(&row)?;
    let avg: Vec<f64> = p1.data().iter().zip(p2.data()).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
    let y = argmax(&avg);
    let stats = estimate_margin_stats(f1, f2, x, y, design, stream)?;
    Ok(compute_weight(&stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Fixed,
    PerPoint,
}

/// On-disk ensemble description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleFile {
    pub version: String,
    pub components: Vec<PathBuf>,
    pub weights: Vec<f64>,
    pub weight_mode: WeightMode,
    #[serde(default)]
    pub alg2: Option<WeightDesign>,
}

impl EnsembleFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: EnsembleFile =
            serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != "v1" {
            return Err(Error::config("version", format!("unsupported {:?}", self.version)));
        }
        if self.components.is_empty() {
            return Err(Error::config("components", "at least one checkpoint is required"));
        }
        if self.weights.len() != self.components.len() {
            return Err(Error::config("weights", "one weight per component is required"));
        }
        if self.weight_mode == WeightMode::PerPoint {
            if self.components.len() != 2 {
                return Err(Error::config("weight_mode", "per_point weights need exactly two components"));
            }
            match &self.alg2 {
                Some(d) => d.validate()?,
                None => return Err(Error::config("alg2", "required when weight_mode is per_point")),
            }
        }
        Ok(())
    }

    /// Loads the component checkpoints; relative paths resolve against `base`.
    pub fn load_components(&self, base: &Path) -> Result<Vec<Arc<ModelParams>>> {
        self.components
            .iter()
            .map(|p| {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                ModelParams::load(&path).map(Arc::new)
            })
            .collect()
    }
}
