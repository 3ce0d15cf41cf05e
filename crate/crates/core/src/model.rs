//! The base soft classifier: an MLP whose last layer is a softmax with
//! inverse temperature β, plus initialization and checkpoint persistence.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::ser::{Error as _, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::stats::{sample_gaussian, RngStream};
use crate::tensor::{self, argmax, Tensor};

pub const DEFAULT_BETA: f64 = 16.0;
pub const CHECKPOINT_VERSION: &str = "v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input dim, hidden widths, class count.
    pub widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl MlpSpec {
    /// The default desk-scale shape `[d, 64, 64, c]` with relu.
    pub fn desk_default(input_dim: usize, classes: usize) -> Self {
        MlpSpec {
            widths: vec![input_dim, 64, 64, classes],
            activation: Activation::Relu,
            beta: DEFAULT_BETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::InvalidArgument(
                "an MLP needs an input width, at least one hidden width, and a class count".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.num_classes() < 2 {
            return Err(Error::InvalidArgument("at least two classes are required".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }
}

/// Which training procedure produced a set of parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "advmacer")]
    AdvMacer,
    #[serde(rename = "macer")]
    Macer,
    #[serde(rename = "smoothadv")]
    SmoothAdv,
    #[serde(rename = "gaussian_aug")]
    GaussianAug,
    #[serde(rename = "untrained")]
    Untrained,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::AdvMacer => "advmacer",
            Method::Macer => "macer",
            Method::SmoothAdv => "smoothadv",
            Method::GaussianAug => "gaussian_aug",
            Method::Untrained => "untrained",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: Method,
    pub sigma: f64,
    pub seed: u64,
}

impl Provenance {
    pub fn untrained(seed: u64) -> Self {
        Provenance {
            method: Method::Untrained,
            sigma: 0.0,
            seed,
        }
    }
}

/// One affine layer; `weight` is `[fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
    pub provenance: Provenance,
}

/// Model parameters placed on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub layers: Vec<(Var, Var)>,
}

impl BoundParams {
    /// Weight and bias handles in layer order.
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl ModelParams {
    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>, provenance: Provenance) -> Result<Self> {
        spec.validate()?;
        let p = ModelParams {
            spec,
            layers,
            provenance,
        };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        let w = &self.spec.widths;
        if self.layers.len() != w.len() - 1 {
            return Err(Error::shape(
                "model",
                format!("{} layers for widths {w:?}", self.layers.len()),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weight.shape() != [w[i], w[i + 1]] || layer.bias.shape() != [w[i + 1]] {
                return Err(Error::shape(
                    "model",
                    format!(
                        "layer {i}: weight {:?}, bias {:?}, expected [{}, {}] and [{}]",
                        layer.weight.shape(),
                        layer.bias.shape(),
                        w[i],
                        w[i + 1],
                        w[i + 1]
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (n, d) = x.expect_2d("forward")?;
        if d != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("input width {d}, model expects {}", self.input_dim()),
            ));
        }
        Ok(n)
    }

    /// Pre-softmax outputs for a `[batch, d]` input.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.check_input(x)?;
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, m) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            h = tensor::matmul(&h, layer.weight.data(), n, k, m);
            h = tensor::add_row_vector(&h, layer.bias.data());
            if i < last {
                match self.spec.activation {
                    Activation::Relu => h.iter_mut().for_each(|v| *v = v.max(0.0)),
                    Activation::Tanh => h.iter_mut().for_each(|v| *v = v.tanh()),
                }
            }
        }
        Tensor::matrix(n, self.num_classes(), h)
    }

    /// `softmax(β · logits)` row by row.
    pub fn forward_soft(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.forward_logits(x)?;
        let c = self.num_classes();
        let data = tensor::softmax_rows(logits.data(), c, self.spec.beta);
        Ok(logits.with_data(data))
    }

    /// Hard classifier: argmax of [`ModelParams::forward_soft`], lowest index on ties.
    pub fn predict_hard(&self, x: &Tensor) -> Result<Vec<usize>> {
        let probs = self.forward_soft(x)?;
        Ok((0..probs.rows()).map(|i| argmax(probs.row(i))).collect())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let mut put = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundParams {
            layers: self
                .layers
                .iter()
                .map(|l| (put(&l.weight), put(&l.bias)))
                .collect(),
        }
    }

    /// Graph version of [`ModelParams::forward_soft`]; same kernels, same values.
    pub fn forward_graph(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
        self.check_input(g.value(x))?;
        let mut h = x;
        let last = bound.layers.len() - 1;
        for (i, &(w, b)) in bound.layers.iter().enumerate() {
            h = g.matmul(h, w)?;
            h = g.add_row_vector(h, b)?;
            if i < last {
                h = match self.spec.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        g.softmax_beta(h, self.spec.beta)
    }

    /// Copies gradients or updated values back from a flat list in
    /// [`BoundParams::vars`] order.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self> {
        if values.len() != 2 * self.layers.len() {
            return Err(Error::shape("with_values", format!("{} tensors", values.len())));
        }
        let mut it = values.into_iter();
        let layers = self
            .layers
            .iter()
            .map(|_| Layer {
                weight: it.next().expect("counted"),
                bias: it.next().expect("counted"),
            })
            .collect();
        let p = ModelParams {
            spec: self.spec.clone(),
            layers,
            provenance: self.provenance.clone(),
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> + '_ {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointOut {
            version: CHECKPOINT_VERSION,
            spec: SpecOut {
                widths: &self.spec.widths,
                activation: self.spec.activation,
                beta: F17(self.spec.beta),
            },
            provenance: ProvenanceOut {
                method: self.provenance.method,
                sigma: F17(self.provenance.sigma),
                seed: self.provenance.seed,
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerOut {
                    w: Matrix17(&l.weight),
                    b: Vector17(l.bias.data()),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointIn = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {:?}, expected {CHECKPOINT_VERSION:?}",
                file.version
            )));
        }
        file.spec
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let widths = &file.spec.widths;
        if file.layers.len() != widths.len() - 1 {
            return Err(Error::Checkpoint(format!(
                "{} layers stored for widths {widths:?}",
                file.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.into_iter().enumerate() {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            if l.w.len() != fan_in || l.w.iter().any(|r| r.len() != fan_out) || l.b.len() != fan_out {
                return Err(Error::Checkpoint(format!(
                    "layer {i} does not match declared shape [{fan_in}, {fan_out}]"
                )));
            }
            layers.push(Layer {
                weight: Tensor::matrix(fan_in, fan_out, l.w.concat())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
                bias: Tensor::vector(l.b),
            });
        }
        Ok(ModelParams {
            spec: file.spec,
            layers,
            provenance: file.provenance,
        })
    }
}

/// He-style initialization: weights `N(0, 2 / fan_in)`, zero biases.
pub fn init_params(spec: &MlpSpec, stream: &RngStream) -> Result<ModelParams> {
    spec.validate()?;
    let layers = spec
        .widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let std = (2.0 / w[0] as f64).sqrt();
            Layer {
                weight: sample_gaussian(&stream.child(i as u64), &[w[0], w[1]], std),
                bias: Tensor::zeros(&[w[1]]),
            }
        })
        .collect();
    Ok(ModelParams {
        spec: spec.clone(),
        layers,
        provenance: Provenance::untrained(stream.root()),
    })
}

/// Serializes an `f64` as a decimal with 17 significant digits.
struct F17(f64);

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(S::Error::custom(format!("non-finite value {}", self.0)));
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(S::Error::custom)?;
        raw.serialize(s)
    }
}

struct Vector17<'a>(&'a [f64]);

impl Serialize for Vector17<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for &v in self.0 {
            seq.serialize_element(&F17(v))?;
        }
        seq.end()
    }
}

struct Matrix17<'a>(&'a Tensor);

impl Serialize for Matrix17<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = self.0.rows();
        let mut seq = s.serialize_seq(Some(rows))?;
        for i in 0..rows {
            seq.serialize_element(&Vector17(self.0.row(i)))?;
        }
        seq.end()
    }
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    version: &'static str,
    spec: SpecOut<'a>,
    provenance: ProvenanceOut,
    layers: Vec<LayerOut<'a>>,
}

#[derive(Serialize)]
struct SpecOut<'a> {
    widths: &'a [usize],
    activation: Activation,
    beta: F17,
}

#[derive(Serialize)]
struct ProvenanceOut {
    method: Method,
    sigma: F17,
    seed: u64,
}

#[derive(Serialize)]
struct LayerOut<'a> {
    w: Matrix17<'a>,
    b: Vector17<'a>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    version: String,
    spec: MlpSpec,
    provenance: Provenance,
    layers: Vec<LayerIn>,
}

#[derive(Deserialize)]
struct LayerIn {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}
