mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use smoothcert::harness::dataset::make_dataset;
use smoothcert::harness::eval::{certify_dataset, evaluate_acr, Certifier};
use smoothcert::harness::experiment::{run_experiment, Summary};
use smoothcert::harness::report::{read_records, write_records};
use smoothcert::model::{Activation, Layer, Method, MlpSpec, ModelParams, Provenance};
use smoothcert::smoothing::SmoothingConfig;
use smoothcert::tensor::Tensor;
use smoothcert::train::{train, TrainConfig};
use smoothcert::Error;

use common::{cp_oracle, quantile_oracle, LnGamma};

/// `class 1 iff x0 > 0`, written as a relu pair.
fn sign_model(d: usize) -> ModelParams {
    let mut w1 = vec![0.0; d * 2];
    w1[0] = 1.0;
    w1[1] = -1.0;
    let layers = vec![
        Layer {
            weight: Tensor::matrix(d, 2, w1).unwrap(),
            bias: Tensor::zeros(&[2]),
        },
        Layer {
            weight: Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
        },
    ];
    let spec = MlpSpec {
        widths: vec![d, 2, 2],
        activation: Activation::Relu,
        beta: 16.0,
    };
    ModelParams::from_layers(spec, layers, Provenance::untrained(0)).unwrap()
}

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Expected certified radius per point for the sign classifier on
/// `x0 ~ N(sep, noise^2)`, integrating over `x0` and the binomial count.
fn expected_acr(sep: f64, noise: f64, sigma: f64, n: u64, alpha: f64) -> f64 {
    let lg = LnGamma::new(n as usize + 2);
    let mut cp_cache: HashMap<u64, f64> = HashMap::new();
    let mut radius_at = |k: u64| {
        let p = *cp_cache.entry(k).or_insert_with(|| cp_oracle(k, n, alpha, &lg));
        if p > 0.5 {
            sigma * quantile_oracle(p)
        } else {
            0.0
        }
    };
    let nf = n as f64;
    let h = 0.002;
    let upper = sep + 9.0 * noise;
    let steps = (upper / h).ceil() as usize;
    let mut total = 0.0;
    for s in 0..=steps {
        let x0 = s as f64 * h;
        let weight = if s == 0 || s == steps { 0.5 } else { 1.0 };
        let density = (-(x0 - sep).powi(2) / (2.0 * noise * noise)).exp() / (noise * (2.0 * std::f64::consts::PI).sqrt());
        let pa = phi(x0 / sigma);
        let sd = (nf * pa * (1.0 - pa)).sqrt();
        let lo = (nf * pa - 12.0 * sd - 1.0).floor().max(0.0) as u64;
        let hi = ((nf * pa + 12.0 * sd + 1.0).ceil() as u64).min(n);
        let mut r = 0.0;
        for k in lo..=hi {
            let log_pmf = lg.at(n + 1) - lg.at(k + 1) - lg.at(n - k + 1)
                + k as f64 * pa.ln()
                + (n - k) as f64 * (1.0 - pa).ln();
            let pmf = if pa >= 1.0 { if k == n { 1.0 } else { 0.0 } } else { log_pmf.exp() };
            if pmf > 0.0 {
                r += pmf * radius_at(k);
            }
        }
        total += weight * h * density * r;
    }
    total
}

#[test]
fn sign_classifier_acr_matches_analytic_expectation() {
    let (sep, noise, sigma) = (1.0, 0.5, 0.5);
    let test = make_dataset("two_gaussians:n=1000,d=2,sep=1,noise=0.5,seed=7,split=test").unwrap();
    let cfg = SmoothingConfig {
        sigma,
        n0: 100,
        n: 10_000,
        alpha: 0.001,
        ..SmoothingConfig::default()
    };
    let certifier = Certifier::Model(Arc::new(sign_model(2)));
    let records = certify_dataset(&certifier, &test, &cfg, 5, 1).unwrap();
    let acr = evaluate_acr(&records).unwrap().acr;
    let expected = expected_acr(sep, noise, sigma, 10_000, 0.001);
    let rel = (acr - expected).abs() / expected;
    assert!(rel < 0.03, "ACR {acr} vs analytic {expected} ({:.2}%)", 100.0 * rel);
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn minimal_experiment_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.json");
    write(
        &config,
        r#"{
            "train_data": "two_gaussians:n=200,d=2,seed=3",
            "test_data": "two_gaussians:n=40,d=2,seed=3,split=test",
            "train": {"method": "gaussian_aug", "epochs": 10, "hidden": [16], "beta": 4.0,
                      "lr_init": 0.01, "smoothing": {"sigma": 0.5, "m": 4}, "seed": 1},
            "certify": {"sigma": 0.5, "n0": 50, "n": 1000},
            "grid": "0:1:0.5",
            "seed": 9
        }"#,
    );
    let start = std::time::Instant::now();
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    let s1 = run_experiment(&config, &out1).unwrap();
    run_experiment(&config, &out2).unwrap();
    assert!(start.elapsed().as_secs() < 300);

    for name in [
        "records.jsonl",
        "summary.json",
        "certified_accuracy.csv",
        "certified_accuracy.svg",
        "timings.jsonl",
        "model.json",
    ] {
        assert!(out1.join(name).is_file(), "{name} missing");
    }
    let r1 = fs::read(out1.join("records.jsonl")).unwrap();
    let r2 = fs::read(out2.join("records.jsonl")).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(
        fs::read(out1.join("certified_accuracy.csv")).unwrap(),
        fs::read(out2.join("certified_accuracy.csv")).unwrap()
    );

    let records = read_records(&out1.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 40);
    assert_eq!(s1.points, 40);
    assert!(s1.clean_accuracy > 0.8, "{}", s1.clean_accuracy);
    let csv = fs::read_to_string(out1.join("certified_accuracy.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("radius,certified_accuracy"));
    assert_eq!(csv.lines().count(), 4);
    let svg = fs::read_to_string(out1.join("certified_accuracy.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    let summary: Summary = serde_json::from_str(&fs::read_to_string(out1.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.components.len(), 1);
    assert_eq!(summary.components[0].provenance.method, Method::GaussianAug);
    assert_eq!(summary.acr, s1.acr);
}

fn tiny_model(method: Method, seed: u64, dir: &Path) -> String {
    let data = make_dataset("two_gaussians:n=100,d=2,seed=4").unwrap();
    let cfg = TrainConfig {
        method,
        epochs: 3,
        hidden: vec![8],
        beta: 4.0,
        lr_init: 0.01,
        attack: smoothcert::attack::AttackConfig {
            steps: 1,
            mc_samples: 2,
            ..Default::default()
        },
        smoothing: SmoothingConfig {
            sigma: 0.5,
            m: 2,
            ..SmoothingConfig::default()
        },
        seed,
        ..TrainConfig::default()
    };
    let (model, _) = train(&data, &cfg).unwrap();
    let name = format!("{method}_{seed}.json");
    model.save(&dir.join(&name)).unwrap();
    name
}

#[test]
fn ensemble_experiment_records_component_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let names = [
        tiny_model(Method::AdvMacer, 1, dir.path()),
        tiny_model(Method::Macer, 2, dir.path()),
        tiny_model(Method::GaussianAug, 3, dir.path()),
    ];
    let config = dir.path().join("ens.json");
    write(
        &config,
        &format!(
            r#"{{
                "test_data": "two_gaussians:n=20,d=2,seed=4,split=test",
                "ensemble": {{"checkpoints": ["{}", "{}", "{}"], "weights": [2, 1, 1]}},
                "certify": {{"sigma": 0.5, "n0": 20, "n": 200}}
            }}"#,
            names[0], names[1], names[2]
        ),
    );
    let out = dir.path().join("out");
    let summary = run_experiment(&config, &out).unwrap();
    let methods: Vec<Method> = summary.components.iter().map(|c| c.provenance.method).collect();
    assert_eq!(methods, [Method::AdvMacer, Method::Macer, Method::GaussianAug]);
    let seeds: Vec<u64> = summary.components.iter().map(|c| c.provenance.seed).collect();
    assert_eq!(seeds, [1, 2, 3]);
    assert!(summary.components.iter().all(|c| c.provenance.sigma == 0.5));
    assert!(summary.components[1].source.ends_with(&names[1]));
    assert_eq!(summary.weights, Some(vec![0.5, 0.25, 0.25]));
    let on_disk: Summary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(on_disk.components, summary.components);
}

#[test]
fn per_point_ensemble_experiment_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_model(Method::GaussianAug, 5, dir.path());
    let b = tiny_model(Method::Macer, 6, dir.path());
    let config = dir.path().join("pp.json");
    write(
        &config,
        &format!(
            r#"{{
                "test_data": "two_gaussians:n=6,d=2,seed=4,split=test",
                "ensemble": {{"checkpoints": ["{a}", "{b}"], "weight_mode": "per_point",
                             "alg2": {{"m": 4, "n": 4, "t": 0.3, "sigma": 0.5, "sigma_tilde": 0.01}}}},
                "certify": {{"sigma": 0.5, "n0": 20, "n": 200}}
            }}"#
        ),
    );
    let summary = run_experiment(&config, &dir.path().join("out")).unwrap();
    assert_eq!(summary.points, 6);
    assert_eq!(summary.weights, None);
}

#[test]
fn bad_configs_fail_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    write(
        &config,
        r#"{"test_data": "two_gaussians:n=5", "ensemble": {"checkpoints": ["nope.json"]}}"#,
    );
    let out = dir.path().join("out");
    match run_experiment(&config, &out) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "ensemble.checkpoints[0]"),
        other => panic!("{other:?}"),
    }
    assert!(!out.exists());

    write(&config, r#"{"test_data": "two_gaussians:n=5", "certify": {"sigma": "big"}}"#);
    match run_experiment(&config, &out) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "certify.sigma"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn records_round_trip_and_report_bad_lines() {
    let test = make_dataset("two_gaussians:n=8,d=2,seed=1,split=test").unwrap();
    let cfg = SmoothingConfig {
        sigma: 0.5,
        n0: 20,
        n: 200,
        ..SmoothingConfig::default()
    };
    let records = certify_dataset(&Certifier::Model(Arc::new(sign_model(2))), &test, &cfg, 1, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    write_records(&path, &records).unwrap();
    let back = read_records(&path).unwrap();
    assert_eq!(back.len(), records.len());
    for (a, b) in back.iter().zip(&records) {
        assert_eq!((a.index, a.label, a.prediction, a.radius, a.correct), (b.index, b.label, b.prediction, b.radius, b.correct));
    }

    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{not json}\n");
    fs::write(&path, text).unwrap();
    match read_records(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
        other => panic!("{other:?}"),
    }
}
