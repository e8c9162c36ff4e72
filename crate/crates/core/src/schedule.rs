//! Staged resolution schedule: zoom (bilinear upsampling) and centering
//! (noise padding around the current patch).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{ScheduleMode, Stage, StagePlan};
use crate::error::{PiiError, Result};
use crate::resample::Resampler;
use crate::tensor::Tensor;

/// Builds the resolution plan for `n_stages` stages ending at `resolution`.
///
/// Working resolutions lie on the grid `(s + 1) * R / (n + 1)` for
/// `s = 0..=n`, so with seven stages the image starts at `R / 8` and stage `s`
/// pads to `(s + 1) R / 8` after upsampling to `(2s + 1) R / 16`, the midpoint
/// of the previous and current sizes. Off-grid values are rounded half up and
/// midpoints floored. Seven zoom+centering stages require `R % 16 == 0`.
pub fn plan_stages(resolution: usize, n_stages: usize, mode: ScheduleMode) -> Result<StagePlan> {
    if n_stages == 0 {
        return Err(PiiError::Parameter("n_stages must be ≥ 1".into()));
    }
    if resolution == 0 {
        return Err(PiiError::Parameter("resolution must be ≥ 1".into()));
    }
    if mode == ScheduleMode::None {
        return Ok(StagePlan {
            final_resolution: resolution,
            initial_resolution: resolution,
            stages: vec![Stage {
                upsample_to: resolution,
                pad_to: resolution,
            }],
            mode,
        });
    }
    if mode == ScheduleMode::ZoomAndCenter && n_stages == 7 && !resolution.is_multiple_of(16) {
        let nearest = ((resolution + 8) / 16).max(1) * 16;
        return Err(PiiError::Parameter(format!(
            "zoom_and_center with 7 stages needs a resolution divisible by 16; \
             {resolution} is not (nearest valid: {nearest})"
        )));
    }

    let denom = 2 * (n_stages + 1);
    let grid: Vec<usize> = (0..=n_stages)
        .map(|s| (2 * (s + 1) * resolution + n_stages + 1) / denom)
        .collect();
    if grid[0] == 0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PiiError::Parameter(format!(
            "resolution {resolution} is too small for {n_stages} stages"
        )));
    }

    let stages = grid
        .windows(2)
        .map(|w| {
            let (prev, cur) = (w[0], w[1]);
            let upsample_to = match mode {
                ScheduleMode::ZoomAndCenter => (prev + cur) / 2,
                ScheduleMode::ZoomOnly => cur,
                ScheduleMode::CenterOnly => prev,
                ScheduleMode::None => unreachable!(),
            };
            Stage {
                upsample_to,
                pad_to: cur,
            }
        })
        .collect();

    let plan = StagePlan {
        final_resolution: resolution,
        initial_resolution: grid[0],
        stages,
        mode,
    };
    plan.check()?;
    Ok(plan)
}

/// Bilinear resize of a `[C, H, H]` image to `res x res`. Downsampling is
/// rejected.
pub fn upsample(x: &Tensor, res: usize) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    if res < h.max(w) {
        return Err(PiiError::Parameter(format!(
            "cannot upsample a {h}x{w} image to {res}x{res}"
        )));
    }
    if res == h && res == w {
        return Ok(x.clone());
    }
    Ok(Resampler::resize(h, w, res, res).apply(x))
}

/// Border widths `(before, after)` when growing `cur` to `res`; the odd pixel
/// goes after (bottom/right).
pub fn pad_split(cur: usize, res: usize) -> (usize, usize) {
    let extra = res - cur;
    (extra / 2, extra - extra / 2)
}

/// Places `x` in the center of a `res x res` canvas whose border is filled
/// with i.i.d. standard normal noise, drawn in row-major order per channel.
pub fn pad_with_noise<R: Rng + ?Sized>(x: &Tensor, res: usize, rng: &mut R) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if res < h || res < w {
        return Err(PiiError::Parameter(format!(
            "cannot pad a {h}x{w} image to {res}x{res}"
        )));
    }
    let (top, _) = pad_split(h, res);
    let (left, _) = pad_split(w, res);
    let mut out = vec![0.0; c * res * res];
    for ch in 0..c {
        for i in 0..res {
            for j in 0..res {
                let inside = i >= top && i < top + h && j >= left && j < left + w;
                out[(ch * res + i) * res + j] = if inside {
                    x.data()[(ch * h + i - top) * w + j - left]
                } else {
                    rng.sample(StandardNormal)
                };
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, res, res], out))
}

/// Cuts the centered `res x res` block out of `x`, the inverse of
/// [`pad_with_noise`].
pub fn crop_center(x: &Tensor, res: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if res > h || res > w {
        return Err(PiiError::Parameter(format!(
            "cannot crop {res}x{res} out of {h}x{w}"
        )));
    }
    let (top, _) = pad_split(res, h);
    let (left, _) = pad_split(res, w);
    let mut out = Vec::with_capacity(c * res * res);
    for ch in 0..c {
        for i in 0..res {
            let row = (ch * h + top + i) * w + left;
            out.extend_from_slice(&x.data()[row..row + res]);
        }
    }
    Ok(Tensor::from_parts(vec![c, res, res], out))
}

/// Runs one stage transition: resample to `upsample_to`, then pad to `pad_to`.
pub fn apply_stage<R: Rng + ?Sized>(x: &Tensor, stage: &Stage, rng: &mut R) -> Result<Tensor> {
    let grown = upsample(x, stage.upsample_to)?;
    pad_with_noise(&grown, stage.pad_to, rng)
}
