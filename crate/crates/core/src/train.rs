//! AdvMacer training and the MACER, SmoothAdv, and Gaussian-augmentation
//! baselines, all expressed as one batch objective:
//!
//! `-(1/n) Σ log ẑ(x̂_i + δ)_{y_i} + (λσ / 2n) Σ_{i∈S} max(γ - ξ̂(x̂_i + δ, y_i), 0)`
//!
//! where `x̂` is the SmoothAdv example (or `x` itself when the method does
//! not attack), `δ` is one Gaussian shift shared by the batch, and `S` is the
//! set of points whose estimated smoothed prediction at `x̂` is correct.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{smooth_pgd_batch, AttackConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::model::{init_params, Activation, BoundParams, Method, MlpSpec, ModelParams, Provenance, DEFAULT_BETA};
use crate::smoothing::{
    correct_mask, noise_block, xi_hat, xi_hat_graph, z_hat_graph, SmoothingConfig, PROB_FLOOR,
};
use crate::stats::{sample_gaussian, RngStream};
use crate::tensor::{self, argmax, Tensor};

const INIT_PATH: u64 = 0;
const SHUFFLE_PATH: u64 = 1;
const BATCH_PATH: u64 = 2;

const ATTACK_PATH: u64 = 0;
const MASK_PATH: u64 = 1;
const SHIFT_PATH: u64 = 2;
const OBJECTIVE_PATH: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub beta: f64,
    /// Reuse the mask-step Gaussian samples for the objective instead of
    /// drawing fresh ones.
    pub reuse_mask_noise: bool,
    pub attack: AttackConfig,
    pub smoothing: SmoothingConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::AdvMacer,
            lambda: 12.0,
            gamma: 8.0,
            epochs: 50,
            batch_size: 64,
            lr_init: 0.1,
            lr_decay_factor: 0.1,
            lr_decay_every: 50,
            momentum: 0.9,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            beta: DEFAULT_BETA,
            reuse_mask_noise: false,
            attack: AttackConfig {
                epsilon: 1.0,
                steps: 2,
                step_size: None,
                mc_samples: 8,
                noise_reuse: true,
            },
            smoothing: SmoothingConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Untrained {
            return Err(Error::config("method", "`untrained` is not a training method"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma", format!("must be > 0, got {}", self.gamma)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr_init > 0.0) {
            return Err(Error::config("lr_init", "must be positive"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::config("lr_decay_factor", "must be positive"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::config("lr_decay_every", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "needs at least one positive width"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("beta", "must be positive"));
        }
        self.attack.validate()?;
        self.smoothing.validate()
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let k = (epoch / self.lr_decay_every) as i32;
        self.lr_init * self.lr_decay_factor.powi(k)
    }

    fn attacks(&self) -> bool {
        matches!(self.method, Method::AdvMacer | Method::SmoothAdv)
    }

    fn radius_weight(&self) -> f64 {
        match self.method {
            Method::AdvMacer | Method::Macer => self.lambda,
            _ => 0.0,
        }
    }

    pub fn mlp_spec(&self, input_dim: usize, classes: usize) -> MlpSpec {
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden);
        widths.push(classes);
        MlpSpec {
            widths,
            activation: self.activation,
            beta: self.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_lr_term: f64,
    /// `|S_θ| / n` over the epoch.
    pub correct_fraction: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

/// Hinge radius loss `(σ/2) max(γ - ξ̂, 0) 1[argmax z = y]`.
pub fn loss_lr(z: &[f64], y: usize, sigma: f64, gamma: f64) -> Result<f64> {
    if argmax(z) != y {
        return Ok(0.0);
    }
    Ok(sigma / 2.0 * (gamma - xi_hat(z, y)?).max(0.0))
}

/// Weights of the batch objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda: f64,
    pub sigma: f64,
    pub gamma: f64,
}

/// Value of an objective, its two terms, and its parameter gradients in
/// [`BoundParams::vars`] order, together with the inputs, noise, and mask it
/// was evaluated with.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub ce: f64,
    pub lr_term: f64,
    pub grads: Vec<Tensor>,
    pub inputs: Tensor,
    pub noise: Tensor,
    pub mask: Vec<f64>,
}

struct ObjectiveVars {
    loss: Var,
    ce: Var,
    lr_term: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn build_objective(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    inputs: &Tensor,
    labels: &[usize],
    noise: &Tensor,
    m: usize,
    mask: &[f64],
    w: ObjectiveWeights,
) -> Result<ObjectiveVars> {
    let n = labels.len();
    let xv = g.constant(inputs.clone());
    let nv = g.constant(noise.clone());
    let z = z_hat_graph(g, params, bound, xv, nv, m)?;
    let zc = g.clamp(z, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let py = g.gather(zc, labels)?;
    let logp = g.log(py)?;
    let mean_logp = g.mean(logp);
    let ce = g.neg(mean_logp);
    if w.lambda == 0.0 {
        return Ok(ObjectiveVars {
            loss: ce,
            ce,
            lr_term: None,
        });
    }
    let xi = xi_hat_graph(g, z, labels)?;
    let neg_xi = g.neg(xi);
    let gap = g.add_scalar(neg_xi, w.gamma);
    let hinge = g.max_with_zero(gap);
    let mask_v = g.constant(Tensor::vector(mask.to_vec()));
    let masked = g.mul(hinge, mask_v)?;
    let total = g.sum(masked);
    let lr_term = g.mul_scalar(total, w.sigma / (2.0 * n as f64));
    let weighted = g.mul_scalar(lr_term, w.lambda);
    let loss = g.add(ce, weighted)?;
    Ok(ObjectiveVars {
        loss,
        ce,
        lr_term: Some(lr_term),
    })
}

/// Evaluates the batch objective at fixed `inputs`, noise, and correct mask,
/// with gradients with respect to the parameters.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    params: &ModelParams,
    inputs: &Tensor,
    labels: &[usize],
    noise: &Tensor,
    m: usize,
    mask: &[f64],
    weights: ObjectiveWeights,
    with_grad: bool,
) -> Result<LossEval> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, with_grad);
    let vars = build_objective(&mut g, params, &bound, inputs, labels, noise, m, mask, weights)?;
    let value = g.value(vars.loss).item();
    let ce = g.value(vars.ce).item();
    let lr_term = vars.lr_term.map_or(0.0, |v| g.value(v).item());
    let grads = if with_grad {
        g.backward(vars.loss)?;
        bound
            .vars()
            .map(|v| g.grad(v).expect("params have grads").clone())
            .collect()
    } else {
        Vec::new()
    };
    Ok(LossEval {
        value,
        ce,
        lr_term,
        grads,
        inputs: inputs.clone(),
        noise: noise.clone(),
        mask: mask.to_vec(),
    })
}

/// Correct-prediction mask `1[argmax ẑ(x_i) = y_i]` with the given noise.
pub fn correct_mask_at(params: &ModelParams, inputs: &Tensor, labels: &[usize], noise: &Tensor, m: usize) -> Result<Vec<f64>> {
    let d = inputs.cols();
    let rep = tensor::repeat_rows(inputs.data(), d, m);
    let noisy: Vec<f64> = rep.iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    let probs = params.forward_soft(&Tensor::matrix(labels.len() * m, d, noisy)?)?;
    let z = Tensor::matrix(
        labels.len(),
        params.num_classes(),
        tensor::group_mean_rows(probs.data(), params.num_classes(), m),
    )?;
    Ok(correct_mask(&z, labels))
}

/// Inputs used by [`loss_advmacer`] and [`loss_macer`].
#[derive(Clone, Debug)]
pub struct LossSetup<'a> {
    pub lambda: f64,
    pub gamma: f64,
    pub attack: &'a AttackConfig,
    pub smoothing: &'a SmoothingConfig,
}

fn smoothed_objective(
    params: &ModelParams,
    at: &Tensor,
    labels: &[usize],
    setup: &LossSetup<'_>,
    stream: &RngStream,
) -> Result<LossEval> {
    let m = setup.smoothing.m;
    let noise = noise_block(labels.len(), m, at.cols(), setup.smoothing.sigma, |i| {
        stream.child(OBJECTIVE_PATH).child(i as u64)
    });
    let mask = correct_mask_at(params, at, labels, &noise, m)?;
    objective(
        params,
        at,
        labels,
        &noise,
        m,
        &mask,
        ObjectiveWeights {
            lambda: setup.lambda,
            sigma: setup.smoothing.sigma,
            gamma: setup.gamma,
        },
        true,
    )
}

/// `L_CE(ẑ(x̂), y) + λ L_R(ẑ; x̂, y)` averaged over the batch, with `x̂` the
/// SmoothAdv example.
pub fn loss_advmacer(
    params: &ModelParams,
    xs: &Tensor,
    labels: &[usize],
    setup: &LossSetup<'_>,
    stream: &RngStream,
) -> Result<LossEval> {
    let x_hat = smooth_pgd_batch(params, xs, labels, setup.attack, setup.smoothing, |i| {
        stream.child(ATTACK_PATH).child(i as u64)
    })?;
    smoothed_objective(params, &x_hat, labels, setup, stream)
}

/// `L_CE(ẑ(x), y) + λ L_R(ẑ; x, y)` at the clean inputs.
pub fn loss_macer(
    params: &ModelParams,
    xs: &Tensor,
    labels: &[usize],
    setup: &LossSetup<'_>,
    stream: &RngStream,
) -> Result<LossEval> {
    smoothed_objective(params, xs, labels, setup, stream)
}

struct Sgd {
    velocity: Vec<Vec<f64>>,
    momentum: f64,
}

impl Sgd {
    fn new(params: &ModelParams, momentum: f64) -> Self {
        Sgd {
            velocity: params.tensors().map(|t| vec![0.0; t.len()]).collect(),
            momentum,
        }
    }

    fn step(&mut self, params: &ModelParams, grads: &[Tensor], lr: f64) -> Result<ModelParams> {
        let updated = params
            .tensors()
            .zip(grads)
            .zip(&mut self.velocity)
            .map(|((p, g), v)| {
                let data = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .zip(v.iter_mut())
                    .map(|((&pv, &gv), vel)| {
                        *vel = self.momentum * *vel + gv;
                        pv - lr * *vel
                    })
                    .collect();
                Tensor::new(p.shape().to_vec(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        params.with_values(updated)
    }
}

/// Runs training and calls `on_epoch` after each completed epoch.
pub fn train_with<F>(data: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<(ModelParams, TrainReport)>
where
    F: FnMut(&EpochRecord, &ModelParams) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let classes = data.num_classes();
    if classes < 2 {
        return Err(Error::InvalidArgument("training labels cover fewer than two classes".into()));
    }
    let root = RngStream::new(cfg.seed);
    let spec = cfg.mlp_spec(data.dim(), classes);
    let mut params = init_params(&spec, &root.child(INIT_PATH))?;
    params.provenance = Provenance {
        method: cfg.method,
        sigma: cfg.smoothing.sigma,
        seed: cfg.seed,
    };
    let mut sgd = Sgd::new(&params, cfg.momentum);
    let mut report = TrainReport::default();
    let n = data.len();
    let d = data.dim();
    let sigma = cfg.smoothing.sigma;
    let m = cfg.smoothing.m;
    let weights = ObjectiveWeights {
        lambda: cfg.radius_weight(),
        sigma,
        gamma: cfg.gamma,
    };

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.learning_rate(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut root.child(SHUFFLE_PATH).child(epoch as u64).rng());

        let (mut sum_loss, mut sum_ce, mut sum_lr, mut correct) = (0.0, 0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let stream = root.child(BATCH_PATH).child(epoch as u64).child(b as u64);
            let (xs, labels) = data.select(chunk)?;
            let bn = labels.len();

            let x_hat = if cfg.attacks() {
                smooth_pgd_batch(&params, &xs, &labels, &cfg.attack, &cfg.smoothing, |i| {
                    stream.child(ATTACK_PATH).child(i as u64)
                })?
            } else {
                xs
            };

            let mask_noise = noise_block(bn, m, d, sigma, |i| stream.child(MASK_PATH).child(i as u64));
            let mask = correct_mask_at(&params, &x_hat, &labels, &mask_noise, m)?;

            let shift = sample_gaussian(&stream.child(SHIFT_PATH), &[d], sigma);
            let shifted = Tensor::matrix(bn, d, tensor::add_row_vector(x_hat.data(), shift.data()))?;
            let noise = if cfg.reuse_mask_noise {
                mask_noise
            } else {
                noise_block(bn, m, d, sigma, |i| stream.child(OBJECTIVE_PATH).child(i as u64))
            };

            let diverged = |value| Error::NonFiniteLoss { epoch, batch: b, value };
            let eval = match objective(&params, &shifted, &labels, &noise, m, &mask, weights, true) {
                // NaN probabilities reach the log as a domain error.
                Err(Error::Domain(_)) => return Err(diverged(f64::NAN)),
                other => other?,
            };
            if !eval.value.is_finite() || eval.grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(diverged(eval.value));
            }
            params = sgd.step(&params, &eval.grads, lr)?;

            sum_loss += eval.value * bn as f64;
            sum_ce += eval.ce * bn as f64;
            sum_lr += eval.lr_term * bn as f64;
            correct += mask.iter().sum::<f64>();
        }

        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            mean_loss: sum_loss / n as f64,
            mean_ce: sum_ce / n as f64,
            mean_lr_term: sum_lr / n as f64,
            correct_fraction: correct / n as f64,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record, &params)?;
        report.epochs.push(record);
    }
    Ok((params, report))
}

pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    train_with(data, cfg, |_, _| Ok(()))
}
