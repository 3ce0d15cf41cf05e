use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use smoothcert::attack::{smooth_pgd, AttackConfig};
use smoothcert::ensemble::{EnsembleFile, EnsembleSpec, WeightDesign, WeightMode};
use smoothcert::harness::dataset::make_dataset;
use smoothcert::harness::eval::{certified_accuracy_table, certify_dataset, parse_grid, run_indexed, Certifier};
use smoothcert::harness::experiment::{
    design_fixed_weights, run_experiment, summary_shell, write_artifacts, ComponentInfo, WallTimes,
};
use smoothcert::harness::report::{append_jsonl, read_records, svg_plot, table_csv};
use smoothcert::model::ModelParams;
use smoothcert::smoothing::SmoothingConfig;
use smoothcert::stats::RngStream;
use smoothcert::train::{train_with, TrainConfig};
use smoothcert::{Error, Result};

#[derive(Parser)]
#[command(name = "smoothcert", version, about = "Certified robustness via randomized smoothing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base classifier from a JSON training config.
    Train(TrainArgs),
    /// Run the smoothed PGD attack against a checkpoint.
    Attack(AttackArgs),
    /// Certify every point of a dataset.
    Certify(CertifyArgs),
    /// Design two-model ensemble weights.
    EnsembleWeights(WeightArgs),
    /// Rebuild the certified-accuracy table or plot from record files.
    Report(ReportArgs),
    /// Run a full experiment from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Training data spec, e.g. `two_gaussians:n=500,d=10,seed=1`.
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSONL file receiving one line per epoch.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write `<out>.epoch<N>.json` every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, default_value_t = 8)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    /// Draw fresh Gaussian samples at every step.
    #[arg(long)]
    fresh_noise: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long, conflicts_with = "ensemble", required_unless_present = "ensemble")]
    model: Option<PathBuf>,
    #[arg(long)]
    ensemble: Option<PathBuf>,
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    #[arg(long, default_value_t = 100)]
    n0: usize,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    #[arg(long, default_value_t = 1_000)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long, default_value = "0:2:0.25")]
    grid: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WeightArgs {
    #[arg(long)]
    model1: PathBuf,
    #[arg(long)]
    model2: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0.3)]
    t: f64,
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    sigma_tilde: f64,
    /// Dataset points averaged for fixed weights.
    #[arg(long, default_value_t = 20)]
    points: usize,
    /// Write a spec that redesigns weights at every certified point.
    #[arg(long)]
    per_point: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Result directories containing records.jsonl; repeat to overlay.
    #[arg(long = "in", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "0:2:0.25")]
    grid: String,
    /// Output file; `.svg` writes a plot, anything else a CSV table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Certify(a) => cmd_certify(a),
        Command::EnsembleWeights(a) => cmd_weights(a),
        Command::Report(a) => cmd_report(a),
        Command::Run(a) => {
            let summary = run_experiment(&a.config, &a.out)?;
            println!("acr {:.4} clean_accuracy {:.4}", summary.acr, summary.clean_accuracy);
            Ok(())
        }
    }
}

fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.into_inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_train_config(&a.config)?;
    let data = make_dataset(&a.dataset)?;
    if let Some(log) = &a.log {
        let _ = fs::remove_file(log);
    }
    if a.checkpoint_every == Some(0) {
        return Err(Error::InvalidArgument("--checkpoint-every must be at least 1".into()));
    }
    let (model, _) = train_with(&data, &cfg, |rec, params| {
        if let Some(every) = a.checkpoint_every {
            if (rec.epoch + 1) % every == 0 {
                params.save(&a.out.with_extension(format!("epoch{}.json", rec.epoch + 1)))?;
            }
        }
        eprintln!(
            "epoch {:>3} lr {:.4} loss {:.5} ce {:.5} radius_term {:.5} correct {:.3}",
            rec.epoch, rec.learning_rate, rec.mean_loss, rec.mean_ce, rec.mean_lr_term, rec.correct_fraction
        );
        match &a.log {
            Some(path) => append_jsonl(path, std::slice::from_ref(rec)),
            None => Ok(()),
        }
    })?;
    model.save(&a.out)
}

#[derive(Serialize)]
struct AttackRecord {
    index: usize,
    label: usize,
    epsilon: f64,
    distance: f64,
    clean_prediction: usize,
    adversarial_prediction: usize,
    adversarial: Vec<f64>,
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    let model = ModelParams::load(&a.model)?;
    let data = make_dataset(&a.dataset)?;
    let cfg = AttackConfig {
        epsilon: a.eps,
        steps: a.steps,
        step_size: a.step_size,
        mc_samples: a.mc_samples,
        noise_reuse: !a.fresh_noise,
    };
    cfg.validate()?;
    let scfg = SmoothingConfig {
        sigma: a.sigma,
        ..SmoothingConfig::default()
    };
    scfg.validate()?;
    let root = RngStream::new(a.seed);
    let records = run_indexed(data.len(), a.workers, |i| {
        let x = data.point(i);
        let y = data.labels()[i];
        let adv = smooth_pgd(&model, x, y, &cfg, &scfg, &root.child(i as u64))?;
        let (clean, _) = data.select(&[i])?;
        let adv_t = smoothcert::tensor::Tensor::matrix(1, adv.len(), adv.clone())?;
        Ok(AttackRecord {
            index: i,
            label: y,
            epsilon: a.eps,
            distance: x.iter().zip(&adv).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt(),
            clean_prediction: model.predict_hard(&clean)?[0],
            adversarial_prediction: model.predict_hard(&adv_t)?[0],
            adversarial: adv,
        })
    })?;
    let _ = fs::remove_file(&a.out);
    append_jsonl(&a.out, &records)
}

fn cmd_certify(a: CertifyArgs) -> Result<()> {
    let cfg = SmoothingConfig {
        sigma: a.sigma,
        n0: a.n0,
        n: a.n,
        alpha: a.alpha,
        batch_size: a.batch_size,
        ..SmoothingConfig::default()
    };
    cfg.validate()?;
    let grid = parse_grid(&a.grid)?;
    let mut data = make_dataset(&a.dataset)?;
    if let Some(n) = a.max_points {
        data = data.truncated(n)?;
    }
    let (certifier, components, weights, mode) = match (&a.model, &a.ensemble) {
        (Some(path), _) => {
            let model = Arc::new(ModelParams::load(path)?);
            let info = vec![ComponentInfo {
                source: path.display().to_string(),
                provenance: model.provenance.clone(),
            }];
            (Certifier::Model(model), info, None, None)
        }
        (None, Some(path)) => {
            let file = EnsembleFile::load(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let models = file.load_components(base)?;
            let info = file
                .components
                .iter()
                .zip(&models)
                .map(|(p, m)| ComponentInfo {
                    source: p.display().to_string(),
                    provenance: m.provenance.clone(),
                })
                .collect();
            match file.weight_mode {
                WeightMode::Fixed => {
                    let spec = EnsembleSpec::normalized(models, &file.weights)?;
                    let w = spec.weights().to_vec();
                    (Certifier::Ensemble(spec), info, Some(w), Some(WeightMode::Fixed))
                }
                WeightMode::PerPoint => (
                    Certifier::PerPoint {
                        models: [models[0].clone(), models[1].clone()],
                        design: file.alg2.clone().expect("validated"),
                    },
                    info,
                    None,
                    Some(WeightMode::PerPoint),
                ),
            }
        }
        (None, None) => return Err(Error::InvalidArgument("pass --model or --ensemble".into())),
    };
    let start = std::time::Instant::now();
    let records = certify_dataset(&certifier, &data, &cfg, a.seed, a.workers)?;
    let mut summary = summary_shell(cfg.sigma, components, weights, mode);
    let elapsed = start.elapsed().as_secs_f64();
    summary.wall_times = WallTimes {
        certify: elapsed,
        total: elapsed,
        ..WallTimes::default()
    };
    let summary = write_artifacts(&a.out, &records, &grid, summary)?;
    println!("acr {:.4} clean_accuracy {:.4}", summary.acr, summary.clean_accuracy);
    Ok(())
}

fn cmd_weights(a: WeightArgs) -> Result<()> {
    let design = WeightDesign {
        m: a.m,
        n: a.n,
        t: a.t,
        sigma: a.sigma,
        sigma_tilde: a.sigma_tilde,
    };
    design.validate()?;
    let f1 = ModelParams::load(&a.model1)?;
    let f2 = ModelParams::load(&a.model2)?;
    let (weights, mode) = if a.per_point {
        (vec![0.5, 0.5], WeightMode::PerPoint)
    } else {
        let data = make_dataset(&a.dataset)?;
        let (w1, w2) = design_fixed_weights(&f1, &f2, &data, &design, a.points, a.seed, a.workers)?;
        (vec![w1, w2], WeightMode::Fixed)
    };
    let file = EnsembleFile {
        version: "v1".into(),
        components: vec![absolute(&a.model1), absolute(&a.model2)],
        weights,
        weight_mode: mode,
        alg2: Some(design),
    };
    file.save(&a.out)?;
    println!("weights {:?}", file.weights);
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let grid = parse_grid(&a.grid)?;
    let mut series = Vec::new();
    for dir in &a.inputs {
        let records = read_records(&dir.join("records.jsonl"))?;
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        series.push((name, certified_accuracy_table(&records, &grid)));
    }
    let text = if a.out.extension().is_some_and(|e| e == "svg") {
        svg_plot(&series)
    } else if series.len() == 1 {
        table_csv(&series[0].1)
    } else {
        let mut out = String::from("radius");
        for (name, _) in &series {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, r) in grid.iter().enumerate() {
            out.push_str(&r.to_string());
            for (_, table) in &series {
                out.push_str(&format!(",{}", table[i].accuracy));
            }
            out.push('\n');
        }
        out
    };
    fs::write(&a.out, text).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })
}
