//! A small reverse-mode autodiff tape.
//!
//! Nodes are appended in evaluation order; [`Graph::backward`] walks them in
//! reverse, accumulating gradients only for nodes that depend on a
//! gradient-carrying leaf. The op set covers what the bundled classifiers
//! need: convolutions with BatchNorm, patch attention and token-mixing MLPs.

use crate::error::{PiiError, Result};
use crate::resample::Resampler;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        /// im2col buffer laid out `[C*k*k, N*H*W]`.
        cols: Vec<f64>,
        k: usize,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Option<Var>,
        /// Effective per-channel multiplier applied to x.
        scale: Vec<f64>,
        /// Normalized input, kept when `gamma` needs a gradient.
        xhat: Option<Vec<f64>>,
        beta: Option<Var>,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Patchify {
        x: Var,
        patch: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        x: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Transpose12 {
        x: Var,
    },
    MeanAxis1 {
        x: Var,
    },
    Resize {
        x: Var,
        resampler: Resampler,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.push(t, Op::Leaf, trainable)
    }

    /// `x @ w + b` over the last axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (din, dout) = match ws[..] {
            [a, b] => (a, b),
            _ => return Err(PiiError::Shape(format!("linear weight must be 2-D, got {ws:?}"))),
        };
        if xs.last() != Some(&din) {
            return Err(PiiError::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(rows, din, dout, 1.0, self.value(x).data(), false, self.value(w).data(), false, beta, &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.ng(&[b]));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, ng))
    }

    /// Stride-1 "same" convolution with an odd square kernel; `w` is
    /// `[O, C, k, k]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).nchw()?;
        let ws = self.value(w).shape().to_vec();
        let (o, k) = match ws[..] {
            [o, ci, k, k2] if ci == c && k == k2 && k % 2 == 1 => (o, k),
            _ => return Err(PiiError::Shape(format!("conv2d: weight {ws:?} vs {c} input channels"))),
        };
        let pad = k / 2;
        let hw = h * wd;
        let ckk = c * k * k;
        let nhw = n * hw;
        let src = self.value(x).data();
        let mut cols = vec![0.0; ckk * nhw];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * nhw..(row + 1) * nhw];
                    for b_ in 0..n {
                        let plane = &src[(b_ * c + ci) * hw..(b_ * c + ci + 1) * hw];
                        for i in 0..h {
                            let si = i as isize + ky as isize - pad as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..wd {
                                let sj = j as isize + kx as isize - pad as isize;
                                if sj >= 0 && sj < wd as isize {
                                    dst[b_ * hw + i * wd + j] = plane[si as usize * wd + sj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut tmp = vec![0.0; o * nhw];
        gemm(o, ckk, nhw, 1.0, self.value(w).data(), false, &cols, false, 0.0, &mut tmp);
        let bias = self.value(b).data();
        let mut out = vec![0.0; n * o * hw];
        for oc in 0..o {
            for b_ in 0..n {
                let s = &tmp[oc * nhw + b_ * hw..oc * nhw + (b_ + 1) * hw];
                let d = &mut out[(b_ * o + oc) * hw..(b_ * o + oc + 1) * hw];
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv = sv + bias[oc];
                }
            }
        }
        let ng = self.ng(&[x, w, b]);
        let cols = if ng { cols } else { Vec::new() };
        Ok(self.push(Tensor::from_parts(vec![n, o, h, wd], out), Op::Conv2d { x, w, b, cols, k }, ng))
    }

    /// BatchNorm using the statistics of the current batch, pooled over every
    /// axis except 1. Returns the output and the batch (mean, biased var).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xt = self.value(x);
        let (mean, var, count) = crate::regularizers::channel_stats(xt)?;
        if count < 2 {
            return Err(PiiError::Parameter("batch norm needs at least two samples per channel".into()));
        }
        let shape = xt.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gm = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; xt.len()];
        let mut out = vec![0.0; xt.len()];
        for b_ in 0..n {
            for ch in 0..c {
                let base = (b_ * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xt.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gm[ch] * h + bt[ch];
                }
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        Ok((v, mean, var))
    }

    /// BatchNorm with fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gm = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let scale: Vec<f64> = gm.iter().zip(&inv_std).map(|(g, s)| g * s).collect();
        let shift: Vec<f64> = (0..gm.len()).map(|c| bt[c] - mean[c] * scale[c]).collect();
        let track_gamma = self.ng(&[gamma]);
        let xhat = if track_gamma {
            let xt = self.value(x);
            let inner: usize = xt.shape()[2..].iter().product();
            let c = xt.shape()[1];
            Some(
                xt.data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let ch = (i / inner) % c;
                        (v - mean[ch]) * inv_std[ch]
                    })
                    .collect(),
            )
        } else {
            None
        };
        self.channel_affine_inner(x, &scale, &shift, Some(gamma), Some(beta), xhat)
    }

    /// `y[:, c] = scale[c] * x[:, c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        self.channel_affine_inner(x, scale, shift, None, None, None)
    }

    fn channel_affine_inner(
        &mut self,
        x: Var,
        scale: &[f64],
        shift: &[f64],
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Option<Vec<f64>>,
    ) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        if shape.len() < 2 || shape[1] != scale.len() || shift.len() != scale.len() {
            return Err(PiiError::Shape(format!(
                "channel affine: input {shape:?} vs {} channels",
                scale.len()
            )));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let out = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / inner) % c;
                v * scale[ch] + shift[ch]
            })
            .collect();
        let mut ng = self.ng(&[x]);
        for p in [gamma, beta].into_iter().flatten() {
            ng |= self.ng(&[p]);
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ChannelAffine {
                x,
                gamma,
                scale: scale.to_vec(),
                xhat,
                beta,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu { x }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu { x }, ng)
    }

    /// 2x2 max pooling with stride 2 (trailing odd rows/cols dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(PiiError::Capability(format!(
                "2x2 pooling needs at least a 2x2 feature map, got {h}x{w}"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (p * oh + i) * ow + j;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, c, oh, ow], out), Op::MaxPool2 { x, argmax }, ng))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let hw = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool { x }, ng))
    }

    /// `[N, C, H, W] -> [N, (H/p)(W/p), C*p*p]`, patches in row-major order.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if h % patch != 0 || w % patch != 0 {
            return Err(PiiError::Capability(format!(
                "resolution {h}x{w} is not divisible by the patch size {patch}"
            )));
        }
        let (ph, pw) = (h / patch, w / patch);
        let t = ph * pw;
        let f = c * patch * patch;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * t * f];
        for b in 0..n {
            for (ti, (py, px)) in (0..ph).flat_map(|a| (0..pw).map(move |b| (a, b))).enumerate() {
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let fi = (ch * patch + dy) * patch + dx;
                            out[(b * t + ti) * f + fi] =
                                src[((b * c + ch) * h + py * patch + dy) * w + px * patch + dx];
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, t, f], out), Op::Patchify { x, patch }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(PiiError::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// Adds `b` to every leading slice of `x`; `b`'s shape must equal the
    /// trailing dimensions of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let bs = self.value(b).shape();
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(PiiError::Shape(format!("add_broadcast: {xs:?} vs {bs:?}")));
        }
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(bd.len()) {
            for (o, v) in chunk.iter_mut().zip(&bd) {
                *o += v;
            }
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::AddBroadcast { x, b }, ng))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = *xt.shape().last().unwrap();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(PiiError::Shape("layer_norm: affine width mismatch".into()));
        }
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xt.len() / d;
        let mut xhat = vec![0.0; xt.len()];
        let mut out = vec![0.0; xt.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gm[j] * h + bt[j];
            }
        }
        let shape = xt.shape().to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention on `[N, T, D]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.value(q).shape().to_vec();
        let (n, t, d) = match shape[..] {
            [n, t, d] => (n, t, d),
            _ => return Err(PiiError::Shape(format!("attention needs [N, T, D], got {shape:?}"))),
        };
        if self.value(k).shape() != shape.as_slice() || self.value(v).shape() != shape.as_slice() || d % heads != 0 {
            return Err(PiiError::Shape("attention: q/k/v shapes or head count mismatch".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; n * heads * t * t];
        let mut out = vec![0.0; n * t * d];
        for b in 0..n {
            for hh in 0..heads {
                let off = hh * dh;
                let pbase = (b * heads + hh) * t * t;
                for i in 0..t {
                    let row = &mut probs[pbase + i * t..pbase + (i + 1) * t];
                    let qi = &qd[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kd[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                        *r = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                    }
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - m).exp();
                        z += *r;
                    }
                    row.iter_mut().for_each(|r| *r /= z);
                    for j in 0..t {
                        let p = row[j];
                        for e in 0..dh {
                            out[(b * t + i) * d + off + e] += p * vd[(b * t + j) * d + off + e];
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Attention { q, k, v, heads, probs },
            ng,
        ))
    }

    /// `[N, A, B] -> [N, B, A]`.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, a, b) = match shape[..] {
            [n, a, b] => (n, a, b),
            _ => return Err(PiiError::Shape(format!("transpose12 needs 3-D input, got {shape:?}"))),
        };
        let out = transpose_nab(self.value(x).data(), n, a, b);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, b, a], out), Op::Transpose12 { x }, ng))
    }

    /// Mean over axis 1 of `[N, T, D]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, t, d) = match shape[..] {
            [n, t, d] => (n, t, d),
            _ => return Err(PiiError::Shape(format!("mean_axis1 needs 3-D input, got {shape:?}"))),
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for b in 0..n {
            for i in 0..t {
                for e in 0..d {
                    out[b * d + e] += src[(b * t + i) * d + e] / t as f64;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::MeanAxis1 { x }, ng))
    }

    /// Bilinear resize of `[N, C, H, W]` to `[N, C, res, res]`.
    pub fn resize(&mut self, x: Var, res: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(x).nchw()?;
        let resampler = Resampler::resize(h, w, res, res);
        let out = resampler.apply(self.value(x));
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Resize { x, resampler }, ng))
    }

    /// Back-propagates the given output gradients.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Grads> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(PiiError::Shape(format!(
                    "seed gradient {:?} for node of shape {:?}",
                    g.shape(),
                    self.value(*v).shape()
                )));
            }
            accumulate(&mut grads[v.0], g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (target, grad) in self.local_grads(node, &g) {
                accumulate(&mut grads[target.0], grad);
            }
            // keep the gradient of intermediate nodes available to callers
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let mut out = Vec::new();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (din, dout) = (self.value(*w).shape()[0], self.value(*w).shape()[1]);
                let rows = gd.len() / dout;
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * din];
                    gemm(rows, dout, din, 1.0, gd, false, self.value(*w).data(), true, 0.0, &mut dx);
                    out.push((*x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx)));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, rows, dout, 1.0, self.value(*x).data(), true, gd, false, 0.0, &mut dw);
                    out.push((*w, Tensor::from_parts(vec![din, dout], dw)));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    out.push((b, Tensor::from_parts(vec![dout], db)));
                }
            }
            Op::Conv2d { x, w, b, cols, k } => {
                let (n, c, h, wd) = self.value(*x).nchw().unwrap();
                let o = self.value(*w).shape()[0];
                let (hw, ckk, k, pad) = (h * wd, c * k * k, *k, k / 2);
                let nhw = n * hw;
                // dout rearranged to [O, N*H*W]
                let mut g2 = vec![0.0; o * nhw];
                for oc in 0..o {
                    for b_ in 0..n {
                        g2[oc * nhw + b_ * hw..oc * nhw + (b_ + 1) * hw]
                            .copy_from_slice(&gd[(b_ * o + oc) * hw..(b_ * o + oc + 1) * hw]);
                    }
                }
                if self.wants(*b) {
                    let db: Vec<f64> = g2.chunks(nhw).map(|r| r.iter().sum()).collect();
                    out.push((*b, Tensor::from_parts(vec![o], db)));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; o * ckk];
                    gemm(o, nhw, ckk, 1.0, &g2, false, cols, true, 0.0, &mut dw);
                    out.push((*w, Tensor::from_parts(self.value(*w).shape().to_vec(), dw)));
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; ckk * nhw];
                    gemm(ckk, o, nhw, 1.0, self.value(*w).data(), true, &g2, false, 0.0, &mut dcols);
                    let mut dx = vec![0.0; n * c * hw];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let row = (ci * k + ky) * k + kx;
                                let src = &dcols[row * nhw..(row + 1) * nhw];
                                for b_ in 0..n {
                                    let plane = &mut dx[(b_ * c + ci) * hw..(b_ * c + ci + 1) * hw];
                                    for i in 0..h {
                                        let si = i as isize + ky as isize - pad as isize;
                                        if si < 0 || si >= h as isize {
                                            continue;
                                        }
                                        for j in 0..wd {
                                            let sj = j as isize + kx as isize - pad as isize;
                                            if sj >= 0 && sj < wd as isize {
                                                plane[si as usize * wd + sj as usize] += src[b_ * hw + i * wd + j];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out.push((*x, Tensor::from_parts(vec![n, c, h, wd], dx)));
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = self.value(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = (n * inner) as f64;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b_ in 0..n {
                    for ch in 0..c {
                        let base = (b_ * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for b_ in 0..n {
                        for ch in 0..c {
                            let base = (b_ * c + ch) * inner;
                            let k = gm[ch] * inv_std[ch] / m;
                            for i in base..base + inner {
                                dx[i] = k * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                    out.push((*x, Tensor::from_parts(shape.to_vec(), dx)));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, Tensor::from_parts(vec![c], dgamma)));
                }
                if self.wants(*beta) {
                    out.push((*beta, Tensor::from_parts(vec![c], dbeta)));
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                scale,
                xhat,
                beta,
            } => {
                let shape = self.value(*x).shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                if self.wants(*x) {
                    let dx = gd
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * scale[(i / inner) % c])
                        .collect();
                    out.push((*x, Tensor::from_parts(shape.to_vec(), dx)));
                }
                if let (Some(gm), Some(xh)) = (gamma, xhat) {
                    if self.wants(*gm) {
                        let mut dg = vec![0.0; c];
                        for (i, v) in gd.iter().enumerate() {
                            dg[(i / inner) % c] += v * xh[i];
                        }
                        out.push((*gm, Tensor::from_parts(vec![c], dg)));
                    }
                }
                if let Some(bt) = beta.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; c];
                    for (i, v) in gd.iter().enumerate() {
                        db[(i / inner) % c] += v;
                    }
                    out.push((bt, Tensor::from_parts(vec![c], db)));
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = gd.iter().zip(xv).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                out.push((*x, Tensor::from_parts(g.shape().to_vec(), dx)));
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let dx = gd.iter().zip(xv).map(|(g, v)| g * gelu_parts(*v).1).collect();
                out.push((*x, Tensor::from_parts(g.shape().to_vec(), dx)));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, src) in argmax.iter().enumerate() {
                    dx[*src] += gd[o];
                }
                out.push((*x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx)));
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).nchw().unwrap();
                let hw = h * w;
                let mut dx = vec![0.0; self.value(*x).len()];
                for (p, v) in gd.iter().enumerate() {
                    dx[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d = v / hw as f64);
                }
                out.push((*x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx)));
            }
            Op::Patchify { x, patch } => {
                let (n, c, h, w) = self.value(*x).nchw().unwrap();
                let patch = *patch;
                let (ph, pw) = (h / patch, w / patch);
                let (t, f) = (ph * pw, c * patch * patch);
                let mut dx = vec![0.0; n * c * h * w];
                for b in 0..n {
                    for ti in 0..t {
                        let (py, px) = (ti / pw, ti % pw);
                        for ch in 0..c {
                            for dy in 0..patch {
                                for dxp in 0..patch {
                                    let fi = (ch * patch + dy) * patch + dxp;
                                    dx[((b * c + ch) * h + py * patch + dy) * w + px * patch + dxp] =
                                        gd[(b * t + ti) * f + fi];
                                }
                            }
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(vec![n, c, h, w], dx)));
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::AddBroadcast { x, b } => {
                if self.wants(*x) {
                    out.push((*x, g.clone()));
                }
                if self.wants(*b) {
                    let bl = self.value(*b).len();
                    let mut db = vec![0.0; bl];
                    for chunk in gd.chunks(bl) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    out.push((*b, Tensor::from_parts(self.value(*b).shape().to_vec(), db)));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).len();
                let gm = self.value(*gamma).data();
                let rows = gd.len() / d;
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        let i = r * d + j;
                        dgamma[j] += gd[i] * xhat[i];
                        dbeta[j] += gd[i];
                        let dh = gd[i] * gm[j];
                        s1 += dh;
                        s2 += dh * xhat[i];
                    }
                    for j in 0..d {
                        let i = r * d + j;
                        let dh = gd[i] * gm[j];
                        dx[i] = inv_std[r] / d as f64 * (d as f64 * dh - s1 - xhat[i] * s2);
                    }
                }
                if self.wants(*x) {
                    out.push((*x, Tensor::from_parts(g.shape().to_vec(), dx)));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, Tensor::from_parts(vec![d], dgamma)));
                }
                if self.wants(*beta) {
                    out.push((*beta, Tensor::from_parts(vec![d], dbeta)));
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let shape = self.value(*q).shape().to_vec();
                let (n, t, d) = (shape[0], shape[1], shape[2]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; n * t * d];
                let mut dk = vec![0.0; n * t * d];
                let mut dv = vec![0.0; n * t * d];
                let mut dp = vec![0.0; t];
                for b in 0..n {
                    for hh in 0..*heads {
                        let off = hh * dh;
                        let pbase = (b * heads + hh) * t * t;
                        for i in 0..t {
                            let prow = &probs[pbase + i * t..pbase + (i + 1) * t];
                            let gi = &gd[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                            for j in 0..t {
                                let vj = (b * t + j) * d + off;
                                dp[j] = gi.iter().zip(&vd[vj..vj + dh]).map(|(a, c)| a * c).sum();
                                for e in 0..dh {
                                    dv[vj + e] += prow[j] * gi[e];
                                }
                            }
                            let dot: f64 = prow.iter().zip(&dp).map(|(a, c)| a * c).sum();
                            for j in 0..t {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let (qi, kj) = ((b * t + i) * d + off, (b * t + j) * d + off);
                                for e in 0..dh {
                                    dq[qi + e] += ds * kd[kj + e];
                                    dk[kj + e] += ds * qd[qi + e];
                                }
                            }
                        }
                    }
                }
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(var) {
                        out.push((var, Tensor::from_parts(shape.clone(), grad)));
                    }
                }
            }
            Op::Transpose12 { x } => {
                let s = g.shape();
                let dx = transpose_nab(gd, s[0], s[1], s[2]);
                out.push((*x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx)));
            }
            Op::MeanAxis1 { x } => {
                let s = self.value(*x).shape().to_vec();
                let (n, t, d) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; n * t * d];
                for b in 0..n {
                    for i in 0..t {
                        for e in 0..d {
                            dx[(b * t + i) * d + e] = gd[b * d + e] / t as f64;
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(s, dx)));
            }
            Op::Resize { x, resampler } => {
                out.push((*x, resampler.adjoint(g)));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        out
    }
}

fn transpose_nab(src: &[f64], n: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for k in 0..n {
        for i in 0..a {
            for j in 0..b {
                out[(k * b + j) * a + i] = src[(k * a + i) * b + j];
            }
        }
    }
    out
}
