//! SmoothAdv: projected L2 gradient ascent on the Monte Carlo cross-entropy
//! of the smoothed soft classifier.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::smoothing::{noise_block, z_hat_graph, SmoothingConfig, PROB_FLOOR};
use crate::stats::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2 * epsilon / steps`.
    pub step_size: Option<f64>,
    pub mc_samples: usize,
    /// Draw the Gaussian samples once per attack and reuse them every step.
    pub noise_reuse: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 1.0,
            steps: 2,
            step_size: None,
            mc_samples: 8,
            noise_reuse: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("attack.epsilon", format!("must be >= 0, got {}", self.epsilon)));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("attack.mc_samples", "must be at least 1"));
        }
        if self.steps > 0 && !(self.step_size() > 0.0) && self.epsilon > 0.0 {
            return Err(Error::config("attack.step_size", "must be positive when steps > 0"));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("attack.step_size", format!("must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        match self.step_size {
            Some(s) => s,
            None if self.steps > 0 => 2.0 * self.epsilon / self.steps as f64,
            None => 0.0,
        }
    }

    fn is_noop(&self) -> bool {
        self.epsilon == 0.0 || self.steps == 0
    }
}

/// Nearest point to `x` in the closed L2 ball `B(center, epsilon)`.
pub fn project_l2_ball(x: &[f64], center: &[f64], epsilon: f64) -> Vec<f64> {
    let dist = x
        .iter()
        .zip(center)
        .map(|(a, c)| (a - c) * (a - c))
        .sum::<f64>()
        .sqrt();
    // Points produced by an earlier projection sit on the sphere up to rounding.
    if dist <= epsilon * (1.0 + 1e-12) {
        return x.to_vec();
    }
    let scale = epsilon / dist;
    x.iter()
        .zip(center)
        .map(|(a, c)| c + (a - c) * scale)
        .collect()
}

/// Monte Carlo cross-entropy `-log ẑ(x)_y` for each row with a fixed noise
/// block, plus its input gradient.
pub fn smoothed_ce_and_grad(
    params: &ModelParams,
    xs: &Tensor,
    labels: &[usize],
    noise: &Tensor,
    m: usize,
) -> Result<(Vec<f64>, Tensor)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let xv = g.param(xs.clone());
    let nv = g.constant(noise.clone());
    let z = z_hat_graph(&mut g, params, &bound, xv, nv, m)?;
    let zc = g.clamp(z, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let py = g.gather(zc, labels)?;
    let logp = g.log(py)?;
    let ce = g.neg(logp);
    let total = g.sum(ce);
    g.backward(total)?;
    let losses = g.value(ce).data().to_vec();
    Ok((losses, g.grad(xv).expect("input is a param").clone()))
}

/// Noise stream for point `i` at PGD step `step`.
fn step_stream(point: &RngStream, step: usize, reuse: bool) -> RngStream {
    point.child(if reuse { 0 } else { step as u64 })
}

/// Batched SmoothAdv. Point `i` draws its noise from `stream_for(i)`.
pub fn smooth_pgd_batch(
    params: &ModelParams,
    xs: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    scfg: &SmoothingConfig,
    stream_for: impl Fn(usize) -> RngStream,
) -> Result<Tensor> {
    if cfg.is_noop() {
        return Ok(xs.clone());
    }
    let (n, d) = xs.expect_2d("smooth_pgd")?;
    if labels.len() != n {
        return Err(Error::shape("smooth_pgd", format!("{n} points, {} labels", labels.len())));
    }
    let m = cfg.mc_samples;
    let step = cfg.step_size();
    let mut current = xs.clone();
    for t in 0..cfg.steps {
        let noise = noise_block(n, m, d, scfg.sigma, |i| step_stream(&stream_for(i), t, cfg.noise_reuse));
        let (_, grad) = smoothed_ce_and_grad(params, &current, labels, &noise, m)?;
        let mut next = Vec::with_capacity(n * d);
        for i in 0..n {
            let gi = grad.row(i);
            let norm = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
            let xi = current.row(i);
            if norm == 0.0 || !norm.is_finite() {
                next.extend_from_slice(xi);
                continue;
            }
            let moved: Vec<f64> = xi.iter().zip(gi).map(|(a, b)| a + step * b / norm).collect();
            next.extend(project_l2_ball(&moved, xs.row(i), cfg.epsilon));
        }
        current = Tensor::matrix(n, d, next)?;
    }
    Ok(current)
}

/// Single-point SmoothAdv; always within `epsilon` of `x`.
pub fn smooth_pgd(
    params: &ModelParams,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
    scfg: &SmoothingConfig,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    let xs = Tensor::matrix(1, x.len(), x.to_vec())?;
    let out = smooth_pgd_batch(params, &xs, &[y], cfg, scfg, |_| stream.clone())?;
    Ok(out.into_data())
}
