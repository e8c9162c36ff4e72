//! Frozen classifiers that inversion can be plugged into.
//!
//! A [`Classifier`] appends its forward pass to a [`Graph`]; the
//! [`ClassifierHandle`] wraps it with input normalization and, for models
//! with a fixed input size, a bilinear resize adapter.

pub mod data;
pub mod toy;
pub mod weights;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{PiiError, Result};
use crate::graph::{Graph, Var};
use crate::regularizers::BatchNormStats;
use crate::tensor::Tensor;

pub use data::{Dataset, Split};
pub use toy::{Arch, ToyNet, TrainConfig, TrainReport, Trained};
pub use weights::{load_model, save_model, Manifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputResolution {
    /// Fully convolutional; any resolution at or above the minimum works.
    Any { min: usize },
    /// Inputs are resized to this side length before the network.
    Fixed(usize),
}

pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    fn in_channels(&self) -> usize {
        3
    }

    fn input_resolution(&self) -> InputResolution;

    /// Running statistics of every BatchNorm layer, in forward order.
    fn bn_stats(&self) -> Option<&BatchNormStats> {
        None
    }

    /// Appends the network applied to `x` (`[N, C, H, W]`) to `g` with
    /// frozen parameters. Returns the logits and the inputs of each
    /// BatchNorm layer.
    fn build(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)>;
}

/// Per-channel input standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || std.iter().any(|s| !(*s > 0.0)) {
            return Err(PiiError::Parameter("normalization needs one positive std per mean".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.chw()?;
        if c != self.mean.len() {
            return Err(PiiError::Shape(format!("{c} channels vs {} normalization channels", self.mean.len())));
        }
        let mut out = x.clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v = (*v - self.mean[ch]) / self.std[ch]);
        }
        Ok(out)
    }
}

/// A recorded forward pass that can be differentiated with respect to its
/// input batch.
pub struct Forward {
    graph: Graph,
    input: Var,
    logits: Var,
    taps: Vec<Var>,
}

impl Forward {
    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits)
    }

    /// BatchNorm-input activations, one per layer.
    pub fn taps(&self) -> Vec<&Tensor> {
        self.taps.iter().map(|t| self.graph.value(*t)).collect()
    }

    /// Gradient of the input batch given gradients of the logits and,
    /// optionally, of the tap activations.
    pub fn input_grad(&self, dlogits: Option<&Tensor>, dtaps: &[Tensor]) -> Result<Tensor> {
        if !dtaps.is_empty() && dtaps.len() != self.taps.len() {
            return Err(PiiError::Shape(format!(
                "{} tap gradients for {} taps",
                dtaps.len(),
                self.taps.len()
            )));
        }
        let mut seeds: Vec<(Var, Tensor)> = Vec::new();
        if let Some(d) = dlogits {
            seeds.push((self.logits, d.clone()));
        }
        for (v, d) in self.taps.iter().zip(dtaps) {
            seeds.push((*v, d.clone()));
        }
        let mut grads = self.graph.backward(&seeds)?;
        Ok(grads
            .take(self.input)
            .unwrap_or_else(|| Tensor::zeros(self.graph.value(self.input).shape())))
    }
}

#[derive(Clone)]
pub struct ClassifierHandle {
    net: Arc<dyn Classifier>,
    normalization: Option<Normalization>,
    name: String,
}

impl fmt::Debug for ClassifierHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassifierHandle")
            .field("name", &self.name)
            .field("num_classes", &self.num_classes())
            .field("input_resolution", &self.input_resolution())
            .finish()
    }
}

impl ClassifierHandle {
    pub fn new(name: impl Into<String>, net: Arc<dyn Classifier>, normalization: Option<Normalization>) -> Self {
        Self {
            net,
            normalization,
            name: name.into(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    pub fn in_channels(&self) -> usize {
        self.net.in_channels()
    }

    pub fn input_resolution(&self) -> InputResolution {
        self.net.input_resolution()
    }

    /// The resolution images are trained at; fully convolutional models
    /// report `None`.
    pub fn native_resolution(&self) -> Option<usize> {
        match self.input_resolution() {
            InputResolution::Fixed(r) => Some(r),
            InputResolution::Any { .. } => None,
        }
    }

    pub fn bn_stats(&self) -> Option<&BatchNormStats> {
        self.net.bn_stats()
    }

    pub fn has_bn_stats(&self) -> bool {
        self.bn_stats().is_some()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Smallest image side the model accepts.
    pub fn min_resolution(&self) -> usize {
        match self.input_resolution() {
            InputResolution::Any { min } => min,
            InputResolution::Fixed(_) => 2,
        }
    }

    /// Records a forward pass over `batch` (`[N, C, H, W]`).
    pub fn forward(&self, batch: &Tensor, normalize: bool) -> Result<Forward> {
        let (_, c, h, w) = batch.nchw()?;
        if c != self.in_channels() {
            return Err(PiiError::Shape(format!(
                "model `{}` expects {} channels, got {c}",
                self.name,
                self.in_channels()
            )));
        }
        if h != w {
            return Err(PiiError::Shape(format!("images must be square, got {h}x{w}")));
        }
        if h < self.min_resolution() {
            return Err(PiiError::Capability(format!(
                "model `{}` needs inputs of at least {}px, got {h}",
                self.name,
                self.min_resolution()
            )));
        }
        let mut g = Graph::new();
        let input = g.input(batch.clone());
        let mut x = input;
        if normalize {
            if let Some(n) = &self.normalization {
                let scale: Vec<f64> = n.std.iter().map(|s| 1.0 / s).collect();
                let shift: Vec<f64> = n.mean.iter().zip(&n.std).map(|(m, s)| -m / s).collect();
                x = g.channel_affine(x, &scale, &shift)?;
            }
        }
        if let InputResolution::Fixed(r) = self.input_resolution() {
            if r != h {
                x = g.resize(x, r)?;
            }
        }
        let (logits, taps) = self.net.build(&mut g, x)?;
        Ok(Forward {
            graph: g,
            input,
            logits,
            taps,
        })
    }

    /// Logits for a batch, evaluated in chunks.
    pub fn logits(&self, batch: &Tensor, normalize: bool) -> Result<Tensor> {
        const CHUNK: usize = 128;
        let n = batch.nchw()?.0;
        if n <= CHUNK {
            return Ok(self.forward(batch, normalize)?.logits().clone());
        }
        let per = batch.len() / n;
        let mut rows = Vec::new();
        let mut k = 0;
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let mut shape = batch.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, batch.data()[start * per..end * per].to_vec())?;
            let l = self.forward(&chunk, normalize)?.logits().clone();
            k = l.shape()[1];
            rows.extend_from_slice(l.data());
        }
        Tensor::new(vec![n, k], rows)
    }

    /// Softmax probabilities, one row per image.
    pub fn probabilities(&self, batch: &Tensor, normalize: bool) -> Result<Vec<Vec<f64>>> {
        let l = self.logits(batch, normalize)?;
        let k = l.shape()[1];
        Ok(l.data().chunks(k).map(softmax).collect())
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean cross-entropy of `[N, K]` logits against `target`, with its
/// gradient.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(PiiError::Shape(format!(
            "logits {shape:?} vs {} targets",
            targets.len()
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    if let Some(t) = targets.iter().find(|t| **t >= k) {
        return Err(PiiError::Parameter(format!("class {t} out of range for {k} classes")));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (i, row) in logits.data().chunks(k).enumerate() {
        let p = softmax(row);
        loss -= p[targets[i]].max(f64::MIN_POSITIVE).ln();
        for j in 0..k {
            grad[i * k + j] = (p[j] - if j == targets[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if *v > bv { (i, *v) } else { (bi, bv) })
        .0
}
