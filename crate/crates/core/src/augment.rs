//! Image augmentations: ColorShift, jitter, ensemble expansion and the
//! flip / crop / grayscale / color-jitter baselines.
//!
//! Every random augmentation is split into a *draw* (the sampled parameters)
//! and a deterministic linear map. Each map exposes `apply` and `adjoint`, the
//! latter being the vector-Jacobian product the engine uses to pull gradients
//! back through the augmentation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AugmentationSpec, BaselineAugKind};
use crate::error::{PiiError, Result};
use crate::resample::Resampler;
use crate::tensor::Tensor;

/// Luma weights shared by grayscale conversion and the color-jitter ops.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub const FLIP_PROBABILITY: f64 = 0.5;
pub const GRAYSCALE_PROBABILITY: f64 = 0.2;
pub const COLOR_JITTER_PROBABILITY: f64 = 0.8;
pub const CROP_SCALE: (f64, f64) = (0.7, 1.0);
pub const CROP_RATIO: (f64, f64) = (0.75, 1.33);
/// Brightness, contrast, saturation, hue.
pub const COLOR_JITTER_STRENGTH: (f64, f64, f64, f64) = (0.4, 0.4, 0.4, 0.1);

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

// ---------------------------------------------------------------------------
// ColorShift

/// Per-channel affine color transform `sigma * x - mu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorShiftParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ColorShiftParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(PiiError::Shape(format!(
                "mu has {} channels, sigma has {}",
                mu.len(),
                sigma.len()
            )));
        }
        if sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(PiiError::Parameter("sigma must be strictly positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mu: vec![0.0; channels],
            sigma: vec![1.0; channels],
        }
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = x.chw()?;
        if c != self.mu.len() {
            return Err(PiiError::Shape(format!(
                "image has {c} channels but ColorShift params have {}",
                self.mu.len()
            )));
        }
        Ok((c, h * w))
    }

    /// `(x + mu) / sigma`, the inverse transform.
    pub fn invert(&self, y: &Tensor) -> Result<Tensor> {
        let (_, plane) = self.check(y)?;
        let mut out = y.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = (*v + self.mu[c]) / self.sigma[c]);
        }
        Ok(out)
    }

    pub fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        let (_, plane) = self.check(g)?;
        let mut out = g.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= self.sigma[c]);
        }
        Ok(out)
    }
}

/// Draws `mu[c] ~ U(-alpha, alpha)` and `sigma[c] = exp(U(-beta, beta))` for
/// three channels.
pub fn sample_color_shift<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> Result<ColorShiftParams> {
    sample_color_shift_channels(alpha, beta, 3, rng)
}

pub fn sample_color_shift_channels<R: Rng + ?Sized>(
    alpha: f64,
    beta: f64,
    channels: usize,
    rng: &mut R,
) -> Result<ColorShiftParams> {
    if !(alpha >= 0.0 && alpha.is_finite() && beta >= 0.0 && beta.is_finite()) {
        return Err(PiiError::Parameter(format!(
            "ColorShift bounds must be nonnegative, got alpha={alpha}, beta={beta}"
        )));
    }
    let mu = (0..channels).map(|_| uniform(rng, -alpha, alpha)).collect();
    let sigma = (0..channels).map(|_| uniform(rng, -beta, beta).exp()).collect();
    Ok(ColorShiftParams { mu, sigma })
}

pub fn color_shift(x: &Tensor, params: &ColorShiftParams) -> Result<Tensor> {
    let (_, plane) = params.check(x)?;
    let mut out = x.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (s, m) = (params.sigma[c], params.mu[c]);
        chunk.iter_mut().for_each(|v| *v = s * *v - m);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// jitter

/// A circular translation by `(dy, dx)` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shift {
    pub dy: i64,
    pub dx: i64,
}

impl Shift {
    pub fn sample<R: Rng + ?Sized>(max_shift: usize, side: usize, rng: &mut R) -> Result<Self> {
        if max_shift >= side {
            return Err(PiiError::Parameter(format!(
                "jitter amplitude {max_shift} must be smaller than the image side {side}"
            )));
        }
        if max_shift == 0 {
            return Ok(Shift { dy: 0, dx: 0 });
        }
        let m = max_shift as i64;
        Ok(Shift {
            dy: rng.random_range(-m..=m),
            dx: rng.random_range(-m..=m),
        })
    }

    pub fn inverse(self) -> Self {
        Shift {
            dy: -self.dy,
            dx: -self.dx,
        }
    }

    /// `out[c, i, j] = x[c, i - dy, j - dx]` with wrap-around.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.chw()?;
        if self.dy == 0 && self.dx == 0 {
            return Ok(x.clone());
        }
        let mut out = vec![0.0; x.len()];
        let src = x.data();
        for ch in 0..c {
            for i in 0..h {
                let si = (i as i64 - self.dy).rem_euclid(h as i64) as usize;
                for j in 0..w {
                    let sj = (j as i64 - self.dx).rem_euclid(w as i64) as usize;
                    out[(ch * h + i) * w + j] = src[(ch * h + si) * w + sj];
                }
            }
        }
        Ok(Tensor::from_parts(vec![c, h, w], out))
    }

    pub fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        self.inverse().apply(g)
    }
}

/// Random circular shift with offsets drawn uniformly from
/// `{-max_shift, ..., max_shift}` on each axis.
pub fn jitter<R: Rng + ?Sized>(x: &Tensor, max_shift: usize, rng: &mut R) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    Shift::sample(max_shift, h.min(w), rng)?.apply(x)
}

// ---------------------------------------------------------------------------
// baseline augmentations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitterDraw {
    /// Application order of the four ops.
    pub order: [JitterOp; 4],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation as a fraction of a full turn.
    pub hue: f64,
}

/// Sampled parameters for one baseline augmentation. `None`/`false` variants
/// mean the random acceptance test failed and the op is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BaselineDraw {
    Flip(bool),
    Crop {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Grayscale(bool),
    ColorJitter(Option<ColorJitterDraw>),
}

impl BaselineDraw {
    pub fn sample<R: Rng + ?Sized>(kind: BaselineAugKind, side: usize, rng: &mut R) -> Self {
        match kind {
            BaselineAugKind::HorizontalFlip => BaselineDraw::Flip(rng.random::<f64>() < FLIP_PROBABILITY),
            BaselineAugKind::Grayscale => BaselineDraw::Grayscale(rng.random::<f64>() < GRAYSCALE_PROBABILITY),
            BaselineAugKind::RandomResizedCrop => sample_crop(side, side, rng),
            BaselineAugKind::ColorJitter => {
                if rng.random::<f64>() >= COLOR_JITTER_PROBABILITY {
                    return BaselineDraw::ColorJitter(None);
                }
                let (b, c, s, h) = COLOR_JITTER_STRENGTH;
                let mut order = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue];
                order.shuffle(rng);
                BaselineDraw::ColorJitter(Some(ColorJitterDraw {
                    order,
                    brightness: uniform(rng, (1.0 - b).max(0.0), 1.0 + b),
                    contrast: uniform(rng, (1.0 - c).max(0.0), 1.0 + c),
                    saturation: uniform(rng, (1.0 - s).max(0.0), 1.0 + s),
                    hue: uniform(rng, -h, h),
                }))
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.map(x, false)
    }

    pub fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        self.map(g, true)
    }

    fn map(&self, x: &Tensor, adjoint: bool) -> Result<Tensor> {
        let (c, h, w) = x.chw()?;
        if c != 3 {
            return Err(PiiError::Shape(format!(
                "baseline augmentations need a 3-channel image, got {c}"
            )));
        }
        Ok(match self {
            BaselineDraw::Flip(false) | BaselineDraw::Grayscale(false) | BaselineDraw::ColorJitter(None) => {
                x.clone()
            }
            BaselineDraw::Flip(true) => flip_horizontal(x),
            BaselineDraw::Grayscale(true) => {
                if adjoint {
                    gray_adjoint(x, 1.0, 0.0)
                } else {
                    gray_blend(x, 0.0)
                }
            }
            BaselineDraw::Crop {
                top,
                left,
                height,
                width,
            } => {
                let r = Resampler::window(h, w, *top, *left, *height, *width, h, w);
                if adjoint {
                    r.adjoint(x)
                } else {
                    r.apply(x)
                }
            }
            BaselineDraw::ColorJitter(Some(d)) => {
                let mut y = x.clone();
                let ops: Vec<JitterOp> = if adjoint {
                    d.order.iter().rev().copied().collect()
                } else {
                    d.order.to_vec()
                };
                for op in ops {
                    y = match (op, adjoint) {
                        (JitterOp::Brightness, _) => y.scale(d.brightness),
                        (JitterOp::Contrast, false) => contrast(&y, d.contrast),
                        (JitterOp::Contrast, true) => contrast_adjoint(&y, d.contrast),
                        (JitterOp::Saturation, false) => gray_blend(&y, d.saturation),
                        (JitterOp::Saturation, true) => gray_adjoint(&y, 1.0 - d.saturation, d.saturation),
                        (JitterOp::Hue, _) => {
                            let m = hue_matrix(d.hue);
                            mix_channels(&y, &if adjoint { transpose3(&m) } else { m })
                        }
                    };
                }
                y
            }
        })
    }
}

/// Draws a RandomResizedCrop window: area fraction in `CROP_SCALE`,
/// log-uniform aspect ratio in `CROP_RATIO`, ten attempts before falling back
/// to the full image.
fn sample_crop<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> BaselineDraw {
    let area = (h * w) as f64;
    let (lr0, lr1) = (CROP_RATIO.0.ln(), CROP_RATIO.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, CROP_SCALE.0, CROP_SCALE.1);
        let ratio = uniform(rng, lr0, lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return BaselineDraw::Crop {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    BaselineDraw::Crop {
        top: 0,
        left: 0,
        height: h,
        width: w,
    }
}

fn flip_horizontal(x: &Tensor) -> Tensor {
    let (_, _, w) = x.chw().expect("checked by caller");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// `keep * x + (1 - keep) * gray(x)` per pixel, broadcast over channels.
fn gray_blend(x: &Tensor, keep: f64) -> Tensor {
    let plane = x.shape()[1] * x.shape()[2];
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..plane {
        let g = LUMA[0] * d[p] + LUMA[1] * d[plane + p] + LUMA[2] * d[2 * plane + p];
        for c in 0..3 {
            out[c * plane + p] = keep * d[c * plane + p] + (1.0 - keep) * g;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Adjoint of `keep * x + gray_w * gray(x)` with `gray_w` folded in: gradient
/// flows as `keep * g + gray_w * LUMA[k] * sum_c g_c`.
fn gray_adjoint(g: &Tensor, gray_w: f64, keep: f64) -> Tensor {
    let plane = g.shape()[1] * g.shape()[2];
    let d = g.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..plane {
        let s = d[p] + d[plane + p] + d[2 * plane + p];
        for k in 0..3 {
            out[k * plane + p] = keep * d[k * plane + p] + gray_w * LUMA[k] * s;
        }
    }
    Tensor::from_parts(g.shape().to_vec(), out)
}

/// Blends with the mean gray level of the whole image.
fn contrast(x: &Tensor, factor: f64) -> Tensor {
    let plane = x.shape()[1] * x.shape()[2];
    let d = x.data();
    let mean = (0..3)
        .map(|c| LUMA[c] * d[c * plane..(c + 1) * plane].iter().sum::<f64>())
        .sum::<f64>()
        / plane as f64;
    x.map(|v| factor * v + (1.0 - factor) * mean)
}

fn contrast_adjoint(g: &Tensor, factor: f64) -> Tensor {
    let plane = g.shape()[1] * g.shape()[2];
    let total = g.sum();
    let mut out = g.scale(factor);
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let add = (1.0 - factor) * LUMA[c] * total / plane as f64;
        chunk.iter_mut().for_each(|v| *v += add);
    }
    out
}

const RGB_TO_YIQ: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [0.596, -0.274, -0.322],
    [0.211, -0.523, 0.312],
];

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose3(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn inverse3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    let det = m[0][0] * adj[0][0] + m[0][1] * adj[1][0] + m[0][2] * adj[2][0];
    let mut out = adj;
    out.iter_mut().flatten().for_each(|v| *v /= det);
    out
}

/// Hue rotation as a linear map: rotate the chroma plane of YIQ space by
/// `turns * 2 pi`.
fn hue_matrix(turns: f64) -> [[f64; 3]; 3] {
    let (s, c) = (turns * std::f64::consts::TAU).sin_cos();
    let rot = [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
    matmul3(&inverse3(&RGB_TO_YIQ), &matmul3(&rot, &RGB_TO_YIQ))
}

fn mix_channels(x: &Tensor, m: &[[f64; 3]; 3]) -> Tensor {
    let plane = x.shape()[1] * x.shape()[2];
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..plane {
        let v = [d[p], d[plane + p], d[2 * plane + p]];
        for (c, row) in m.iter().enumerate() {
            out[c * plane + p] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Applies one randomly drawn baseline augmentation with the standard
/// parameters (flip p=0.5, crop scale [0.7, 1] ratio [0.75, 1.33], grayscale
/// p=0.2, color jitter p=0.8 with strengths (0.4, 0.4, 0.4, 0.1)).
pub fn baseline_augment<R: Rng + ?Sized>(x: &Tensor, kind: BaselineAugKind, rng: &mut R) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if c != 3 {
        return Err(PiiError::Shape(format!(
            "baseline augmentations need a 3-channel image, got {c}"
        )));
    }
    if h != w {
        return Err(PiiError::Shape("baseline augmentations need square images".into()));
    }
    BaselineDraw::sample(kind, h, rng).apply(x)
}

/// Like [`baseline_augment`] but takes the kind by name.
pub fn baseline_augment_named<R: Rng + ?Sized>(x: &Tensor, kind: &str, rng: &mut R) -> Result<Tensor> {
    baseline_augment(x, kind.parse()?, rng)
}

// ---------------------------------------------------------------------------
// ensembles

/// Everything applied to one ensemble member: baseline augmentations in
/// order, then ColorShift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberTransform {
    pub baseline: Vec<BaselineDraw>,
    pub color_shift: Option<ColorShiftParams>,
}

impl MemberTransform {
    pub fn identity() -> Self {
        Self {
            baseline: Vec::new(),
            color_shift: None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(spec: &AugmentationSpec, channels: usize, side: usize, rng: &mut R) -> Result<Self> {
        let baseline = spec
            .baseline_augs
            .iter()
            .map(|&k| BaselineDraw::sample(k, side, rng))
            .collect();
        let color_shift = if spec.color_shift_enabled() {
            Some(sample_color_shift_channels(spec.alpha, spec.beta, channels, rng)?)
        } else {
            None
        };
        Ok(Self { baseline, color_shift })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for b in &self.baseline {
            y = b.apply(&y)?;
        }
        if let Some(cs) = &self.color_shift {
            y = color_shift(&y, cs)?;
        }
        Ok(y)
    }

    pub fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        let mut y = match &self.color_shift {
            Some(cs) => cs.adjoint(g)?,
            None => g.clone(),
        };
        for b in self.baseline.iter().rev() {
            y = b.adjoint(&y)?;
        }
        Ok(y)
    }
}

/// A batch of augmented copies together with the transforms that made them.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub batch: Tensor,
    pub members: Vec<MemberTransform>,
}

pub fn sample_members<R: Rng + ?Sized>(
    spec: &AugmentationSpec,
    channels: usize,
    side: usize,
    rng: &mut R,
) -> Result<Vec<MemberTransform>> {
    if spec.ensemble_size < 1 {
        return Err(PiiError::Parameter("ensemble_size must be ≥ 1".into()));
    }
    (0..spec.ensemble_size)
        .map(|_| MemberTransform::sample(spec, channels, side, rng))
        .collect()
}

pub fn apply_members(x: &Tensor, members: &[MemberTransform]) -> Result<Tensor> {
    let views = members.iter().map(|m| m.apply(x)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&views)
}

/// Expands `x` into `e` independently augmented copies, drawing fresh
/// parameters on every call.
pub fn make_ensemble<R: Rng + ?Sized>(x: &Tensor, spec: &AugmentationSpec, rng: &mut R) -> Result<Ensemble> {
    let (c, h, _) = x.chw()?;
    let members = sample_members(spec, c, h, rng)?;
    let batch = apply_members(x, &members)?;
    Ok(Ensemble { batch, members })
}
