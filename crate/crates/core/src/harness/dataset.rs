//! Synthetic desk-scale datasets and CSV ingestion.
//!
//! A dataset is named by a spec string `kind:key=value,...`, for example
//! `two_gaussians:n=500,d=10,sep=2,noise=0.5,seed=3,split=test` or
//! `csv:path=data/train.csv`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    TwoGaussians,
    FourBlobs,
    Rings,
    Csv(PathBuf),
}

/// A parsed dataset spec string.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub d: usize,
    /// Class-mean offset (gaussians, blobs) or gap between ring radii.
    pub sep: f64,
    /// Per-coordinate standard deviation of the data noise.
    pub noise: f64,
    pub seed: u64,
    pub split: Split,
}

impl DatasetSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |msg: String| Error::config("dataset", format!("{msg} in {spec:?}"));
        let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let mut params = BTreeMap::new();
        for pair in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, found {pair:?}")))?;
            if params.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(bad(format!("duplicate key {k:?}")));
            }
        }
        let mut take = |key: &str| params.remove(key);
        fn num<T: std::str::FromStr>(key: &str, v: Option<String>, default: T, spec: &str) -> Result<T> {
            match v {
                None => Ok(default),
                Some(s) => s
                    .parse()
                    .map_err(|_| Error::config(format!("dataset.{key}"), format!("cannot parse {s:?} in {spec:?}"))),
            }
        }
        let kind = match kind.trim() {
            "two_gaussians" => DatasetKind::TwoGaussians,
            "four_blobs" => DatasetKind::FourBlobs,
            "rings" => DatasetKind::Rings,
            "csv" => DatasetKind::Csv(PathBuf::from(
                take("path").ok_or_else(|| bad("csv datasets need path=".into()))?,
            )),
            other => return Err(bad(format!("unknown dataset kind {other:?}"))),
        };
        let default_sep = if kind == DatasetKind::Rings { 1.0 } else { 2.0 };
        let parsed = DatasetSpec {
            n: num("n", take("n"), 1000, spec)?,
            d: num("d", take("d"), 2, spec)?,
            sep: num("sep", take("sep"), default_sep, spec)?,
            noise: num("noise", take("noise"), 0.5, spec)?,
            seed: num("seed", take("seed"), 0, spec)?,
            split: match take("split").as_deref() {
                None | Some("train") => Split::Train,
                Some("test") => Split::Test,
                Some(other) => return Err(Error::config("dataset.split", format!("unknown split {other:?}"))),
            },
            kind,
        };
        if let Some(key) = params.keys().next() {
            return Err(bad(format!("unknown key {key:?}")));
        }
        if !matches!(parsed.kind, DatasetKind::Csv(_)) {
            if parsed.n == 0 {
                return Err(Error::config("dataset.n", "must be at least 1"));
            }
            if parsed.d < 2 {
                return Err(Error::config("dataset.d", "must be at least 2"));
            }
            if !(parsed.noise >= 0.0 && parsed.noise.is_finite()) {
                return Err(Error::config("dataset.noise", "must be >= 0"));
            }
            if !parsed.sep.is_finite() {
                return Err(Error::config("dataset.sep", "must be finite"));
            }
        }
        Ok(parsed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Vec<usize>, classes: usize, split: Split, seed: u64) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{:?} features for {} labels", features.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
            classes,
            split,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Features and labels of the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty selection".into()));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("row {i} out of range for {} rows", self.len())));
            }
            data.extend_from_slice(self.point(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::matrix(indices.len(), d, data)?, labels))
    }

    /// First `n` rows (or all of them if there are fewer).
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let keep: Vec<usize> = (0..n.min(self.len())).collect();
        let (features, labels) = self.select(&keep)?;
        Dataset::new(self.name.clone(), features, labels, self.classes, self.split, self.seed)
    }

    /// Writes a header row followed by one row per point with the label last.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for (i, &y) in self.labels.iter().enumerate() {
            let mut row: Vec<String> = self.point(i).iter().map(|v| v.to_string()).collect();
            row.push(y.to_string());
            w.write_record(&row).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a CSV with a header row and a trailing integer label column.
    pub fn from_csv(path: &Path, split: Split) -> Result<Self> {
        let file = path.display().to_string();
        let parse_err = |line: usize, message: String| Error::Parse {
            file: file.clone(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(path)
            .map_err(|e| csv_io(path, e))?;
        let width = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.len();
        if width < 2 {
            return Err(parse_err(1, "header needs at least one feature and a label column".into()));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| parse_err(line, e.to_string()))?;
            if record.len() != width {
                return Err(parse_err(line, format!("expected {width} fields, found {}", record.len())));
            }
            for field in record.iter().take(width - 1) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad feature value {field:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("non-finite feature value {field:?}")));
                }
                data.push(v);
            }
            let label = &record[width - 1];
            labels.push(
                label
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| parse_err(line, format!("bad label {label:?}")))?,
            );
        }
        if labels.is_empty() {
            return Err(parse_err(2, "no data rows".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let features = Tensor::matrix(labels.len(), width - 1, data)?;
        Dataset::new(format!("csv:{file}"), features, labels, classes, split, 0)
    }

    /// For `two_gaussians` data the Bayes-optimal rule is `class 1 iff
    /// w·x + b > 0` with `w = e_0`, `b = 0`.
    pub fn bayes_boundary(&self) -> Option<(Vec<f64>, f64)> {
        if !self.name.starts_with("two_gaussians") {
            return None;
        }
        let mut w = vec![0.0; self.dim()];
        w[0] = 1.0;
        Some((w, 0.0))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            file: path.display().to_string(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Builds a dataset from a spec string; see the module docs.
pub fn make_dataset(spec: &str) -> Result<Dataset> {
    make_from_spec(&DatasetSpec::parse(spec)?)
}

pub fn make_from_spec(spec: &DatasetSpec) -> Result<Dataset> {
    let stream = RngStream::new(spec.seed).child(spec.split.stream_id());
    let mut rng = stream.rng();
    let (n, d, s) = (spec.n, spec.d, spec.noise);
    let (name, classes) = match spec.kind {
        DatasetKind::Csv(ref path) => return Dataset::from_csv(path, spec.split),
        DatasetKind::TwoGaussians => ("two_gaussians", 2),
        DatasetKind::FourBlobs => ("four_blobs", 4),
        DatasetKind::Rings => ("rings", 2),
    };
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        let mut row = vec![0.0; d];
        match spec.kind {
            DatasetKind::TwoGaussians => {
                row[0] = if y == 1 { spec.sep } else { -spec.sep };
            }
            DatasetKind::FourBlobs => {
                row[0] = if y & 1 == 1 { spec.sep } else { -spec.sep };
                row[1] = if y & 2 == 2 { spec.sep } else { -spec.sep };
            }
            DatasetKind::Rings => {
                let radius = 1.0 + spec.sep * y as f64;
                let angle = rng.random::<f64>() * std::f64::consts::TAU;
                row[0] = radius * angle.cos();
                row[1] = radius * angle.sin();
            }
            DatasetKind::Csv(_) => unreachable!(),
        }
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += s * z;
        }
        data.extend(row);
        labels.push(y);
    }
    let features = Tensor::matrix(n, d, data)?;
    Dataset::new(name, features, labels, classes, spec.split, spec.seed)
}
