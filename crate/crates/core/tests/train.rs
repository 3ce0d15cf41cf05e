use smoothcert::attack::AttackConfig;
use smoothcert::autodiff::Graph;
use smoothcert::harness::dataset::make_dataset;
use smoothcert::model::{Activation, Layer, Method, MlpSpec, ModelParams, Provenance};
use smoothcert::smoothing::{noise_block, SmoothingConfig};
use smoothcert::stats::{sample_gaussian, RngStream};
use smoothcert::tensor::Tensor;
use smoothcert::train::{
    correct_mask_at, loss_advmacer, loss_macer, objective, train, train_with, LossSetup, ObjectiveWeights,
    TrainConfig,
};
use smoothcert::Error;

fn small_config(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        lambda: 6.0,
        gamma: 8.0,
        epochs: 5,
        batch_size: 32,
        lr_init: 0.01,
        hidden: vec![16],
        beta: 4.0,
        attack: AttackConfig {
            epsilon: 0.5,
            steps: 2,
            mc_samples: 4,
            ..AttackConfig::default()
        },
        smoothing: SmoothingConfig {
            m: 4,
            ..SmoothingConfig::default()
        },
        seed: 3,
        ..TrainConfig::default()
    }
}

fn flat(p: &ModelParams) -> Vec<f64> {
    p.tensors().flat_map(|t| t.data().to_vec()).collect()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse normal CDF by bisection on erfc.
fn probit(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if std_normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn gaussian_aug_fits_separable_blobs_under_noise() {
    let data = make_dataset("two_gaussians:n=200,d=2,sep=2,noise=0.3,seed=11").unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        ..small_config(Method::GaussianAug)
    };
    let (model, report) = train(&data, &cfg).unwrap();
    assert_eq!(report.epochs.len(), 50);

    let sigma = cfg.smoothing.sigma;
    let copies = 10;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..data.len() {
        let eps = sample_gaussian(&RngStream::new(99).child(i as u64), &[copies, 2], sigma);
        for r in 0..copies {
            rows.extend(data.point(i).iter().zip(eps.row(r)).map(|(a, b)| a + b));
            labels.push(data.labels()[i]);
        }
    }
    let preds = model.predict_hard(&Tensor::matrix(labels.len(), 2, rows).unwrap()).unwrap();
    let acc = preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64;
    assert!(acc >= 0.95, "noisy training accuracy {acc}");
}

#[test]
fn same_seed_gives_identical_parameters() {
    let data = make_dataset("four_blobs:n=120,d=3,seed=2").unwrap();
    let cfg = small_config(Method::AdvMacer);
    let (a, ra) = train(&data, &cfg).unwrap();
    let (b, rb) = train(&data, &cfg).unwrap();
    let (fa, fb) = (flat(&a), flat(&b));
    assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
    for (x, y) in ra.epochs.iter().zip(&rb.epochs) {
        assert_eq!(x.mean_loss.to_bits(), y.mean_loss.to_bits());
    }
    let other = train(&data, &TrainConfig { seed: 4, ..cfg }).unwrap().0;
    assert_ne!(flat(&other), fa);
}

#[test]
fn advmacer_without_attack_or_radius_term_matches_gaussian_aug_each_step() {
    let data = make_dataset("two_gaussians:n=96,d=4,seed=5").unwrap();
    let degenerate = TrainConfig {
        lambda: 0.0,
        attack: AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        },
        ..small_config(Method::AdvMacer)
    };
    let baseline = small_config(Method::GaussianAug);

    let collect = |cfg: &TrainConfig| {
        let mut snapshots = Vec::new();
        let (_, report) = train_with(&data, cfg, |_, p| {
            snapshots.push(flat(p));
            Ok(())
        })
        .unwrap();
        (snapshots, report)
    };
    let (sa, ra) = collect(&degenerate);
    let (sb, rb) = collect(&baseline);
    assert_eq!(sa, sb);
    for (x, y) in ra.epochs.iter().zip(&rb.epochs) {
        assert_eq!(x.mean_loss, y.mean_loss);
        assert_eq!(x.correct_fraction, y.correct_fraction);
    }
}

fn toy_model() -> ModelParams {
    let spec = MlpSpec {
        widths: vec![2, 3, 2],
        activation: Activation::Relu,
        beta: 2.0,
    };
    let layers = vec![
        Layer {
            weight: Tensor::matrix(2, 3, vec![0.8, -0.5, 0.3, 0.2, 0.9, -0.7]).unwrap(),
            bias: Tensor::vector(vec![0.1, 0.0, 0.2]),
        },
        Layer {
            weight: Tensor::matrix(3, 2, vec![1.0, -0.4, -0.6, 0.7, 0.5, 0.2]).unwrap(),
            bias: Tensor::vector(vec![0.05, -0.05]),
        },
    ];
    ModelParams::from_layers(spec, layers, Provenance::untrained(0)).unwrap()
}

#[test]
fn advmacer_without_attack_equals_macer_loss() {
    let model = toy_model();
    let xs = Tensor::matrix(3, 2, vec![0.5, -0.2, -1.0, 0.4, 0.3, 0.9]).unwrap();
    let labels = [0, 1, 0];
    let smoothing = SmoothingConfig {
        m: 6,
        ..SmoothingConfig::default()
    };
    let attack = AttackConfig {
        epsilon: 0.0,
        ..AttackConfig::default()
    };
    let setup = LossSetup {
        lambda: 3.0,
        gamma: 8.0,
        attack: &attack,
        smoothing: &smoothing,
    };
    let stream = RngStream::new(21);
    let a = loss_advmacer(&model, &xs, &labels, &setup, &stream).unwrap();
    let b = loss_macer(&model, &xs, &labels, &setup, &stream).unwrap();
    assert_eq!(a.value, b.value);
    for (ga, gb) in a.grads.iter().zip(&b.grads) {
        assert_eq!(ga, gb);
    }

    let ce_only = LossSetup { lambda: 0.0, ..setup };
    let c = loss_macer(&model, &xs, &labels, &ce_only, &stream).unwrap();
    assert_eq!(c.lr_term, 0.0);
    assert_eq!(c.value, c.ce);
    assert_eq!(c.ce, b.ce);
}

/// Recomputes ẑ for the toy model by hand and evaluates the mean loss.
#[test]
fn macer_loss_matches_hand_evaluation() {
    let model = toy_model();
    let xs = Tensor::matrix(4, 2, vec![0.5, -0.2, -1.0, 0.4, 0.3, 0.9, 1.5, 1.5]).unwrap();
    let labels = [0usize, 1, 0, 1];
    let (lambda, gamma, sigma, m) = (2.5, 3.0, 0.5, 5);
    let noise = noise_block(4, m, 2, sigma, |i| RngStream::new(8).child(i as u64));
    let mask = correct_mask_at(&model, &xs, &labels, &noise, m).unwrap();
    let eval = objective(
        &model,
        &xs,
        &labels,
        &noise,
        m,
        &mask,
        ObjectiveWeights { lambda, sigma, gamma },
        false,
    )
    .unwrap();

    let w1 = [[0.8, -0.5, 0.3], [0.2, 0.9, -0.7]];
    let b1 = [0.1, 0.0, 0.2];
    let w2 = [[1.0, -0.4], [-0.6, 0.7], [0.5, 0.2]];
    let b2 = [0.05, -0.05];
    let clamp = |p: f64| p.clamp(1e-6, 1.0 - 1e-6);

    let (mut ce, mut hinge, mut correct) = (0.0, 0.0, 0);
    for (i, &y) in labels.iter().enumerate() {
        let mut z = [0.0f64; 2];
        for r in 0..m {
            let row = noise.row(i * m + r);
            let x = [xs.row(i)[0] + row[0], xs.row(i)[1] + row[1]];
            let h: Vec<f64> = (0..3)
                .map(|j| (x[0] * w1[0][j] + x[1] * w1[1][j] + b1[j]).max(0.0))
                .collect();
            let l: Vec<f64> = (0..2)
                .map(|k| h[0] * w2[0][k] + h[1] * w2[1][k] + h[2] * w2[2][k] + b2[k])
                .collect();
            let e0 = (2.0 * l[0]).exp();
            let e1 = (2.0 * l[1]).exp();
            z[0] += e0 / (e0 + e1) / m as f64;
            z[1] += e1 / (e0 + e1) / m as f64;
        }
        ce -= clamp(z[y]).ln();
        let pred = if z[1] > z[0] { 1 } else { 0 };
        if pred == y {
            correct += 1;
            let xi = probit(clamp(z[y])) - probit(clamp(z[1 - y]));
            hinge += (gamma - xi).max(0.0);
        }
    }
    let n = labels.len() as f64;
    ce /= n;
    let lr_term = sigma / (2.0 * n) * hinge;
    assert_eq!(mask.iter().sum::<f64>() as usize, correct);
    assert!((eval.ce - ce).abs() < 1e-12, "{} vs {ce}", eval.ce);
    assert!((eval.lr_term - lr_term).abs() < 1e-9, "{} vs {lr_term}", eval.lr_term);
    assert!((eval.value - (ce + lambda * lr_term)).abs() < 1e-9);
}

#[test]
fn correct_mask_carries_no_gradient() {
    let model = toy_model();
    let xs = Tensor::matrix(2, 2, vec![0.5, -0.2, -1.0, 0.4]).unwrap();
    let noise = noise_block(2, 3, 2, 0.25, |i| RngStream::new(1).child(i as u64));
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let mask = g.param(Tensor::vector(vec![1.0, 1.0]));
    let xv = g.constant(xs.clone());
    let nv = g.constant(noise.clone());
    let z = smoothcert::smoothing::z_hat_graph(&mut g, &model, &bound, xv, nv, 3).unwrap();
    let xi = smoothcert::smoothing::xi_hat_graph(&mut g, z, &[0, 1]).unwrap();
    let neg = g.neg(xi);
    let gap = g.add_scalar(neg, 8.0);
    let hinge = g.max_with_zero(gap);
    let masked = g.mul(hinge, mask).unwrap();
    let total = g.sum(masked);
    g.backward(total).unwrap();
    assert!(g.grad(mask).is_some());

    // The objective takes the mask as data.
    let w = ObjectiveWeights {
        lambda: 1.0,
        sigma: 0.25,
        gamma: 8.0,
    };
    let on = objective(&model, &xs, &[0, 1], &noise, 3, &[1.0, 1.0], w, true).unwrap();
    let first_only = objective(&model, &xs, &[0, 1], &noise, 3, &[1.0, 0.0], w, true).unwrap();
    let second_only = objective(&model, &xs, &[0, 1], &noise, 3, &[0.0, 1.0], w, true).unwrap();
    let none = objective(&model, &xs, &[0, 1], &noise, 3, &[0.0, 0.0], w, true).unwrap();
    // Gradients are affine in the mask, so no term depends on d(mask)/dθ.
    for k in 0..on.grads.len() {
        for j in 0..on.grads[k].len() {
            let lhs = on.grads[k].data()[j] + none.grads[k].data()[j];
            let rhs = first_only.grads[k].data()[j] + second_only.grads[k].data()[j];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_stays_finite_for_100_epochs_everywhere() {
    let datasets = [
        "two_gaussians:n=40,d=2,seed=1",
        "four_blobs:n=40,d=2,seed=1",
        "rings:n=40,d=2,seed=1",
    ];
    let methods = [Method::AdvMacer, Method::Macer, Method::SmoothAdv, Method::GaussianAug];
    for spec in datasets {
        let data = make_dataset(spec).unwrap();
        for method in methods {
            // Library defaults apart from width and a single attack step.
            let cfg = TrainConfig {
                method,
                epochs: 100,
                batch_size: 20,
                hidden: vec![8],
                attack: AttackConfig {
                    steps: 1,
                    mc_samples: 2,
                    ..TrainConfig::default().attack
                },
                smoothing: SmoothingConfig {
                    m: 2,
                    ..SmoothingConfig::default()
                },
                ..TrainConfig::default()
            };
            let (_, report) = train(&data, &cfg).unwrap_or_else(|e| panic!("{spec} {method}: {e}"));
            assert_eq!(report.epochs.len(), 100);
            assert!(
                report.epochs.iter().all(|r| r.mean_loss.is_finite()),
                "{spec} {method}"
            );
        }
    }
}

#[test]
fn exploding_step_reports_non_finite_loss() {
    let data = make_dataset("two_gaussians:n=40,d=2,seed=1").unwrap();
    let cfg = TrainConfig {
        lr_init: 1e305,
        momentum: 0.0,
        epochs: 20,
        ..small_config(Method::GaussianAug)
    };
    match train(&data, &cfg) {
        Err(Error::NonFiniteLoss { .. }) => {}
        other => panic!("expected NonFiniteLoss, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn invalid_config_is_rejected_with_field_path() {
    let data = make_dataset("two_gaussians:n=40,d=2,seed=1").unwrap();
    let cfg = TrainConfig {
        gamma: 0.0,
        ..small_config(Method::Macer)
    };
    let err = train(&data, &cfg).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("gamma"), "{err}");
}
