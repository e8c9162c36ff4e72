//! Separable bilinear resampling with an exact adjoint.
//!
//! Uses the half-pixel convention: output sample `o` of `n_out` maps to source
//! coordinate `start + (o + 0.5) * len / n_out - 0.5`, clamped to the window.

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) struct AxisWeights {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

impl AxisWeights {
    /// Weights that sample the window `[start, start + len)` of an axis into
    /// `n_out` outputs.
    pub(crate) fn new(start: usize, len: usize, n_out: usize) -> Self {
        assert!(len >= 1 && n_out >= 1);
        let last = (start + len - 1) as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut w_hi = Vec::with_capacity(n_out);
        let scale = len as f64 / n_out as f64;
        for o in 0..n_out {
            let src = (start as f64 + (o as f64 + 0.5) * scale - 0.5).clamp(start as f64, last);
            let i0 = src.floor();
            let i1 = (i0 + 1.0).min(last);
            lo.push(i0 as usize);
            hi.push(i1 as usize);
            w_hi.push(src - i0);
        }
        Self { lo, hi, w_hi }
    }

    fn n_out(&self) -> usize {
        self.lo.len()
    }
}

/// A bilinear map from `[.., in_h, in_w]` planes to `[.., out_h, out_w]`.
#[derive(Clone, Debug)]
pub(crate) struct Resampler {
    in_h: usize,
    in_w: usize,
    rows: AxisWeights,
    cols: AxisWeights,
}

impl Resampler {
    pub(crate) fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self::window(in_h, in_w, 0, 0, in_h, in_w, out_h, out_w)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn window(
        in_h: usize,
        in_w: usize,
        top: usize,
        left: usize,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Self {
        assert!(top + h <= in_h && left + w <= in_w);
        Self {
            in_h,
            in_w,
            rows: AxisWeights::new(top, h, out_h),
            cols: AxisWeights::new(left, w, out_w),
        }
    }

    pub(crate) fn out_hw(&self) -> (usize, usize) {
        (self.rows.n_out(), self.cols.n_out())
    }

    fn sample_plane(&self, src: &[f64], dst: &mut [f64]) {
        let (oh, ow) = self.out_hw();
        for oy in 0..oh {
            let (r0, r1, wy) = (self.rows.lo[oy], self.rows.hi[oy], self.rows.w_hi[oy]);
            for ox in 0..ow {
                let (c0, c1, wx) = (self.cols.lo[ox], self.cols.hi[ox], self.cols.w_hi[ox]);
                let top = src[r0 * self.in_w + c0] * (1.0 - wx) + src[r0 * self.in_w + c1] * wx;
                let bot = src[r1 * self.in_w + c0] * (1.0 - wx) + src[r1 * self.in_w + c1] * wx;
                dst[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }

    fn adjoint_plane(&self, g: &[f64], dst: &mut [f64]) {
        let (oh, ow) = self.out_hw();
        for oy in 0..oh {
            let (r0, r1, wy) = (self.rows.lo[oy], self.rows.hi[oy], self.rows.w_hi[oy]);
            for ox in 0..ow {
                let (c0, c1, wx) = (self.cols.lo[ox], self.cols.hi[ox], self.cols.w_hi[ox]);
                let v = g[oy * ow + ox];
                dst[r0 * self.in_w + c0] += v * (1.0 - wy) * (1.0 - wx);
                dst[r0 * self.in_w + c1] += v * (1.0 - wy) * wx;
                dst[r1 * self.in_w + c0] += v * wy * (1.0 - wx);
                dst[r1 * self.in_w + c1] += v * wy * wx;
            }
        }
    }

    /// Applies the map to every trailing `[H, W]` plane of `x`.
    pub(crate) fn apply(&self, x: &Tensor) -> Tensor {
        let nd = x.ndim();
        assert!(nd >= 2);
        assert_eq!(&x.shape()[nd - 2..], &[self.in_h, self.in_w]);
        let (oh, ow) = self.out_hw();
        let planes = x.len() / (self.in_h * self.in_w);
        let mut out = vec![0.0; planes * oh * ow];
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            let src = &x.data()[p * self.in_h * self.in_w..(p + 1) * self.in_h * self.in_w];
            self.sample_plane(src, dst);
        }
        let mut shape = x.shape()[..nd - 2].to_vec();
        shape.extend([oh, ow]);
        Tensor::from_parts(shape, out)
    }

    /// Vector-Jacobian product: pulls an output-space gradient back to input space.
    pub(crate) fn adjoint(&self, g: &Tensor) -> Tensor {
        let nd = g.ndim();
        let (oh, ow) = self.out_hw();
        assert_eq!(&g.shape()[nd - 2..], &[oh, ow]);
        let planes = g.len() / (oh * ow);
        let mut out = vec![0.0; planes * self.in_h * self.in_w];
        for (p, dst) in out.chunks_mut(self.in_h * self.in_w).enumerate() {
            self.adjoint_plane(&g.data()[p * oh * ow..(p + 1) * oh * ow], dst);
        }
        let mut shape = g.shape()[..nd - 2].to_vec();
        shape.extend([self.in_h, self.in_w]);
        Tensor::from_parts(shape, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (ih, iw, oh, ow) in [(5, 5, 9, 9), (7, 6, 3, 4), (4, 4, 4, 4)] {
            let r = Resampler::resize(ih, iw, oh, ow);
            let x = Tensor::randn(&[2, ih, iw], &mut rng);
            let g = Tensor::randn(&[2, oh, ow], &mut rng);
            let lhs: f64 = r.apply(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(r.adjoint(&g).data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn window_of_full_extent_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 6, 6], &mut rng);
        let y = Resampler::window(6, 6, 0, 0, 6, 6, 6, 6).apply(&x);
        assert_eq!(x, y);
    }
}
