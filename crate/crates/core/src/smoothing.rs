//! Gaussian smoothing: the Monte Carlo soft estimator, the radius surrogate,
//! and the statistical CERTIFY / PREDICT procedures.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{BoundParams, ModelParams};
use crate::stats::{binomial_test_half, clopper_pearson_lower, norm_icdf, sample_gaussian, RngStream};
use crate::tensor::{self, argmax, argmax_excluding, Tensor};

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before `log`
/// or the normal quantile.
pub const PROB_FLOOR: f64 = 1e-6;

/// Stream path ids under a point's stream.
pub const SELECT_PATH: u64 = 0;
pub const ESTIMATE_PATH: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    pub sigma: f64,
    /// Monte Carlo samples for the training-time estimator.
    pub m: usize,
    pub n0: usize,
    pub n: usize,
    pub alpha: f64,
    pub batch_size: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            sigma: 0.25,
            m: 8,
            n0: 100,
            n: 10_000,
            alpha: 0.001,
            batch_size: 1_000,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("smoothing.{field}"), msg));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma", format!("must be positive, got {}", self.sigma));
        }
        if self.m == 0 {
            return bad("m", "must be at least 1".into());
        }
        if self.n0 == 0 {
            return bad("n0", "must be at least 1".into());
        }
        if self.n < self.n0 {
            return bad("n", format!("must be >= n0 ({}), got {}", self.n0, self.n));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", format!("must be in (0, 1), got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        Ok(())
    }
}

/// A hard classifier that can be smoothed.
pub trait BaseClassifier: Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Class index for every row of a `[batch, d]` input.
    fn classify(&self, inputs: &Tensor) -> Result<Vec<usize>>;
}

impl BaseClassifier for ModelParams {
    fn input_dim(&self) -> usize {
        ModelParams::input_dim(self)
    }

    fn num_classes(&self) -> usize {
        ModelParams::num_classes(self)
    }

    fn classify(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        self.predict_hard(inputs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationResult {
    /// `None` means ABSTAIN.
    pub prediction: Option<usize>,
    pub radius: f64,
    pub pa_lower: f64,
    pub counts: Vec<u64>,
    pub elapsed: f64,
}

impl CertificationResult {
    pub fn abstained(&self) -> bool {
        self.prediction.is_none()
    }
}

/// `[rows, d]` copies of `x` with `N(0, sigma^2)` noise drawn from `stream`.
pub fn noisy_copies(x: &[f64], rows: usize, sigma: f64, stream: &RngStream) -> Tensor {
    let d = x.len();
    let noise = sample_gaussian(stream, &[rows, d], sigma);
    let base = tensor::repeat_rows(x, d, rows);
    let data = base.iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    Tensor::matrix(rows, d, data).expect("rows, d > 0")
}

/// Per-class tallies of the base classifier over `num` noisy copies of `x`.
/// Batch `b` draws from `stream.child(b)`, so the tally is independent of
/// how batches are scheduled.
pub fn sample_counts<C: BaseClassifier + ?Sized>(
    clf: &C,
    x: &[f64],
    num: usize,
    sigma: f64,
    batch_size: usize,
    stream: &RngStream,
) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; clf.num_classes()];
    let mut done = 0;
    let mut batch = 0u64;
    while done < num {
        let rows = batch_size.min(num - done);
        let inputs = noisy_copies(x, rows, sigma, &stream.child(batch));
        for c in clf.classify(&inputs)? {
            counts[c] += 1;
        }
        done += rows;
        batch += 1;
    }
    Ok(counts)
}

fn check_point<C: BaseClassifier + ?Sized>(clf: &C, x: &[f64]) -> Result<()> {
    if x.len() != clf.input_dim() {
        return Err(Error::shape(
            "smoothing",
            format!("point has {} features, classifier expects {}", x.len(), clf.input_dim()),
        ));
    }
    Ok(())
}

/// CERTIFY with the one-sided bound: `R = sigma * Φ⁻¹(pA_lower)` when
/// `pA_lower > 1/2`, otherwise ABSTAIN.
pub fn certify<C: BaseClassifier + ?Sized>(
    clf: &C,
    x: &[f64],
    cfg: &SmoothingConfig,
    stream: &RngStream,
) -> Result<CertificationResult> {
    let start = Instant::now();
    check_point(clf, x)?;
    let selection = sample_counts(clf, x, cfg.n0, cfg.sigma, cfg.batch_size, &stream.child(SELECT_PATH))?;
    let top = argmax_counts(&selection);
    let counts = sample_counts(clf, x, cfg.n, cfg.sigma, cfg.batch_size, &stream.child(ESTIMATE_PATH))?;
    let pa_lower = clopper_pearson_lower(counts[top], cfg.n as u64, cfg.alpha)?;
    let (prediction, radius) = if pa_lower > 0.5 {
        (Some(top), cfg.sigma * norm_icdf(pa_lower)?)
    } else {
        (None, 0.0)
    };
    Ok(CertificationResult {
        prediction,
        radius,
        pa_lower,
        counts,
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// PREDICT: the top class over `n` draws if a two-sided binomial test on the
/// top two counts rejects `p = 1/2` at level `alpha`. Uses the same draws as
/// the estimation phase of [`certify`].
pub fn predict<C: BaseClassifier + ?Sized>(
    clf: &C,
    x: &[f64],
    cfg: &SmoothingConfig,
    stream: &RngStream,
) -> Result<Option<usize>> {
    check_point(clf, x)?;
    let counts = sample_counts(clf, x, cfg.n, cfg.sigma, cfg.batch_size, &stream.child(ESTIMATE_PATH))?;
    let top = argmax_counts(&counts);
    let runner_up = counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &c)| c)
        .max()
        .unwrap_or(0);
    let n_a = counts[top];
    if binomial_test_half(n_a, n_a + runner_up) <= cfg.alpha {
        Ok(Some(top))
    } else {
        Ok(None)
    }
}

fn argmax_counts(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Monte Carlo estimate `ẑ(x) = (1/m) Σ F(x + δ_k)` with `m = cfg.m`.
pub fn z_hat(params: &ModelParams, x: &[f64], cfg: &SmoothingConfig, stream: &RngStream) -> Result<Vec<f64>> {
    let inputs = noisy_copies(x, cfg.m, cfg.sigma, stream);
    let probs = params.forward_soft(&inputs)?;
    Ok(tensor::group_mean_rows(probs.data(), params.num_classes(), cfg.m))
}

/// Graph form of [`z_hat`] for a batch. `noise` is `[batch * m, d]` with the
/// `m` rows for point `i` stored consecutively.
pub fn z_hat_graph(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    x: Var,
    noise: Var,
    m: usize,
) -> Result<Var> {
    let rep = g.repeat_rows(x, m)?;
    let noisy = g.add(rep, noise)?;
    let probs = params.forward_graph(g, bound, noisy)?;
    g.group_mean_rows(probs, m)
}

/// Draws the `[batch * m, d]` noise block for [`z_hat_graph`], point `i`
/// using `stream_for(i)`.
pub fn noise_block(
    batch: usize,
    m: usize,
    d: usize,
    sigma: f64,
    stream_for: impl Fn(usize) -> RngStream,
) -> Tensor {
    let mut data = Vec::with_capacity(batch * m * d);
    for i in 0..batch {
        data.extend_from_slice(sample_gaussian(&stream_for(i), &[m, d], sigma).data());
    }
    Tensor::matrix(batch * m, d, data).expect("nonempty batch")
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// `Φ⁻¹(z_y) − Φ⁻¹(max_{y'≠y} z_{y'})` on clamped probabilities.
pub fn xi_hat(z: &[f64], y: usize) -> Result<f64> {
    if y >= z.len() || z.len() < 2 {
        return Err(Error::InvalidArgument(format!("label {y} for {} classes", z.len())));
    }
    let other = argmax_excluding(z, y);
    Ok(norm_icdf(clamp_prob(z[y]))? - norm_icdf(clamp_prob(z[other]))?)
}

/// Graph form of [`xi_hat`] over a `[batch, c]` probability matrix. The
/// runner-up class is chosen from the current values and does not carry a
/// gradient of its own.
pub fn xi_hat_graph(g: &mut Graph, z: Var, labels: &[usize]) -> Result<Var> {
    let zc = g.clamp(z, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let runners: Vec<usize> = {
        let t = g.value(z);
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| argmax_excluding(t.row(i), y))
            .collect()
    };
    let top = g.gather(zc, labels)?;
    let second = g.gather(zc, &runners)?;
    let qa = g.norm_icdf(top)?;
    let qb = g.norm_icdf(second)?;
    g.sub(qa, qb)
}

/// Whether `argmax ẑ = y` for each row, as a 0/1 vector.
pub fn correct_mask(z: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| if argmax(z.row(i)) == y { 1.0 } else { 0.0 })
        .collect()
}

/// Two-bound radius `(σ/2)(Φ⁻¹(pa) − Φ⁻¹(pb))`.
pub fn certified_radius(pa: f64, pb: f64, sigma: f64) -> Result<f64> {
    if pa < pb {
        return Err(Error::InvalidArgument(format!("pa ({pa}) < pb ({pb})")));
    }
    if !(pb > 0.0 && pa < 1.0) {
        return Err(Error::Domain(format!("need 0 < pb <= pa < 1, got pa={pa}, pb={pb}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be nonnegative, got {sigma}")));
    }
    Ok((sigma / 2.0 * (norm_icdf(pa)? - norm_icdf(pb)?)).max(0.0))
}
