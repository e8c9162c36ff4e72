//! Image priors used by the regularized baselines: four-direction total
//! variation, squared l2 norm, and batch-statistics feature matching.

use serde::{Deserialize, Serialize};

use crate::config::RegularizerWeights;
use crate::error::{PiiError, Result};
use crate::tensor::Tensor;

/// Stored BatchNorm running statistics, one entry per normalized layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats {
    pub layers: Vec<LayerStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(layers: Vec<LayerStats>) -> Result<Self> {
        for (k, l) in layers.iter().enumerate() {
            if l.mean.len() != l.var.len() {
                return Err(PiiError::Shape(format!("layer {k}: mean/var width mismatch")));
            }
            if l.var.iter().any(|v| *v < 0.0) {
                return Err(PiiError::Parameter(format!("layer {k}: negative variance")));
            }
        }
        Ok(Self { layers })
    }
}

// Offsets (a, b, c, d) of the difference x[i + a, j + b] - x[i + c, j + d] for
// the vertical, horizontal, diagonal and anti-diagonal directions.
const DIRECTIONS: [(usize, usize, usize, usize); 4] = [
    (1, 0, 0, 0),
    (0, 1, 0, 0),
    (1, 1, 0, 0),
    (1, 0, 0, 1),
];

fn tv_terms(x: &Tensor, mut grad: Option<&mut [f64]>) -> Result<f64> {
    let (c, h, w) = x.chw()?;
    if h < 2 || w < 2 {
        return Err(PiiError::Parameter(format!(
            "total variation needs at least a 2x2 image, got {h}x{w}"
        )));
    }
    let d = x.data();
    let mut total = 0.0;
    for &(a, b, cc, dd) in &DIRECTIONS {
        // valid (i, j) keep every index in range
        let rows = h - a.max(cc);
        let cols = w - b.max(dd);
        let at = |ch: usize, i: usize, j: usize| (ch * h + i) * w + j;
        let mut s = 0.0;
        for ch in 0..c {
            for i in 0..rows {
                for j in 0..cols {
                    let diff = d[at(ch, i + a, j + b)] - d[at(ch, i + cc, j + dd)];
                    s += diff * diff;
                }
            }
        }
        let norm = s.sqrt();
        total += norm;
        if let Some(g) = grad.as_deref_mut() {
            if norm > 0.0 {
                for ch in 0..c {
                    for i in 0..rows {
                        for j in 0..cols {
                            let (p, q) = (at(ch, i + a, j + b), at(ch, i + cc, j + dd));
                            let k = (d[p] - d[q]) / norm;
                            g[p] += k;
                            g[q] -= k;
                        }
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Sum over the four neighbour directions of the root of the summed squared
/// differences (all channels pooled under each root).
pub fn total_variation(x: &Tensor) -> Result<f64> {
    tv_terms(x, None)
}

/// Value and gradient of [`total_variation`]. Directions whose differences
/// all vanish contribute a zero subgradient.
pub fn total_variation_grad(x: &Tensor) -> Result<(f64, Tensor)> {
    let mut g = vec![0.0; x.len()];
    let v = tv_terms(x, Some(&mut g))?;
    Ok((v, Tensor::from_parts(x.shape().to_vec(), g)))
}

pub fn l2_penalty(x: &Tensor) -> f64 {
    x.sum_sq()
}

pub fn l2_penalty_grad(x: &Tensor) -> (f64, Tensor) {
    (x.sum_sq(), x.scale(2.0))
}

/// Per-channel mean and (biased) variance of `[N, C, ...]` activations,
/// pooled over the batch and all trailing dimensions.
pub fn channel_stats(act: &Tensor) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let shape = act.shape();
    if shape.len() < 2 {
        return Err(PiiError::Shape(format!("activations need [N, C, ...], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let count = n * inner;
    let d = act.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            mean[ch] += d[base..base + inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            var[ch] += d[base..base + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    Ok((mean, var, count))
}

fn feature_terms(acts: &[Tensor], stats: &BatchNormStats, want_grad: bool) -> Result<(f64, Vec<Tensor>)> {
    if acts.len() != stats.layers.len() {
        return Err(PiiError::Shape(format!(
            "{} activation layers but {} stored statistics",
            acts.len(),
            stats.layers.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (k, (act, st)) in acts.iter().zip(&stats.layers).enumerate() {
        let (mean, var, count) = channel_stats(act)?;
        if mean.len() != st.mean.len() {
            return Err(PiiError::Shape(format!(
                "layer {k}: {} channels vs {} stored",
                mean.len(),
                st.mean.len()
            )));
        }
        if count < 2 {
            return Err(PiiError::Parameter(format!(
                "layer {k}: need at least two pooled samples per channel for a variance"
            )));
        }
        let dm: Vec<f64> = mean.iter().zip(&st.mean).map(|(a, b)| a - b).collect();
        let dv: Vec<f64> = var.iter().zip(&st.var).map(|(a, b)| a - b).collect();
        let nm = dm.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nv = dv.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += nm + nv;
        if want_grad {
            let shape = act.shape();
            let (n, c) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let cnt = count as f64;
            let mut g = vec![0.0; act.len()];
            for b in 0..n {
                for ch in 0..c {
                    let gm = if nm > 0.0 { dm[ch] / nm / cnt } else { 0.0 };
                    let gv = if nv > 0.0 { dv[ch] / nv * 2.0 / cnt } else { 0.0 };
                    let base = (b * c + ch) * inner;
                    for i in base..base + inner {
                        g[i] = gm + gv * (act.data()[i] - mean[ch]);
                    }
                }
            }
            grads.push(Tensor::from_parts(shape.to_vec(), g));
        }
    }
    Ok((total, grads))
}

/// `sum_k ||mu_k - mu_hat_k|| + ||var_k - var_hat_k||` over layers.
pub fn feature_regularizer(acts: &[Tensor], stats: &BatchNormStats) -> Result<f64> {
    Ok(feature_terms(acts, stats, false)?.0)
}

/// Value and per-layer activation gradients of [`feature_regularizer`].
pub fn feature_regularizer_grad(acts: &[Tensor], stats: &BatchNormStats) -> Result<(f64, Vec<Tensor>)> {
    feature_terms(acts, stats, true)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegularizerValues {
    pub tv: f64,
    pub l2: f64,
    pub feature: f64,
}

/// `nll + sum_r weight_r * value_r`.
pub fn compose_loss(nll: f64, weights: &RegularizerWeights, values: &RegularizerValues) -> f64 {
    debug_assert!(weights.tv >= 0.0 && weights.l2 >= 0.0 && weights.feature >= 0.0);
    nll + weights.tv * values.tv + weights.l2 * values.l2 + weights.feature * values.feature
}
