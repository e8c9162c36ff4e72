//! With every plug-in switched off, the engine must be plain Adam on the
//! cross-entropy of a single view.

use std::sync::Arc;

use pii_core::graph::{Graph, Var};
use pii_core::models::InputResolution;
use pii_core::{invert, AugmentationSpec, Classifier, ClassifierHandle, InversionConfig, RegularizerWeights, ScheduleMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C: usize = 3;
const HIDDEN: usize = 5;
const K: usize = 4;
const R: usize = 8;

/// 1x1 convolution, ReLU, global average pool, linear head.
struct TwoLayer {
    w1: Vec<f64>, // [HIDDEN, C]
    b1: Vec<f64>,
    w2: Vec<f64>, // [HIDDEN, K]
    b2: Vec<f64>,
}

impl TwoLayer {
    fn new(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        Self {
            w1: v(HIDDEN * C),
            b1: v(HIDDEN),
            w2: v(HIDDEN * K),
            b2: v(K),
        }
    }

    /// Loss and input gradient for one `[C, R, R]` image, by hand.
    fn loss_and_grad(&self, x: &[f64], target: usize) -> (f64, Vec<f64>) {
        let p = R * R;
        let mut h = vec![0.0; HIDDEN * p];
        for o in 0..HIDDEN {
            for q in 0..p {
                h[o * p + q] = self.b1[o] + (0..C).map(|c| self.w1[o * C + c] * x[c * p + q]).sum::<f64>();
            }
        }
        let pooled: Vec<f64> = (0..HIDDEN)
            .map(|o| h[o * p..(o + 1) * p].iter().map(|v| v.max(0.0)).sum::<f64>() / p as f64)
            .collect();
        let z: Vec<f64> = (0..K)
            .map(|k| self.b2[k] + (0..HIDDEN).map(|o| pooled[o] * self.w2[o * K + k]).sum::<f64>())
            .collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        let dz: Vec<f64> = (0..K)
            .map(|k| (z[k] - lse).exp() - if k == target { 1.0 } else { 0.0 })
            .collect();
        let dpooled: Vec<f64> = (0..HIDDEN)
            .map(|o| (0..K).map(|k| self.w2[o * K + k] * dz[k]).sum::<f64>())
            .collect();
        let mut dx = vec![0.0; C * p];
        for o in 0..HIDDEN {
            for q in 0..p {
                if h[o * p + q] > 0.0 {
                    let dh = dpooled[o] / p as f64;
                    for c in 0..C {
                        dx[c * p + q] += self.w1[o * C + c] * dh;
                    }
                }
            }
        }
        (loss, dx)
    }
}

impl Classifier for TwoLayer {
    fn num_classes(&self) -> usize {
        K
    }

    fn input_resolution(&self) -> InputResolution {
        InputResolution::Any { min: 1 }
    }

    fn build(&self, g: &mut Graph, x: Var) -> pii_core::Result<(Var, Vec<Var>)> {
        let w1 = g.leaf(Tensor::new(vec![HIDDEN, C, 1, 1], self.w1.clone())?, false);
        let b1 = g.leaf(Tensor::new(vec![HIDDEN], self.b1.clone())?, false);
        let w2 = g.leaf(Tensor::new(vec![HIDDEN, K], self.w2.clone())?, false);
        let b2 = g.leaf(Tensor::new(vec![K], self.b2.clone())?, false);
        let h = g.conv2d(x, w1, b1)?;
        let a = g.relu(h);
        let pooled = g.global_avg_pool(a)?;
        Ok((g.linear(pooled, w2, Some(b2))?, Vec::new()))
    }
}

/// Textbook Adam with cosine-decayed step size.
fn reference_run(net: &TwoLayer, x0: Vec<f64>, cfg: &InversionConfig) -> (Vec<f64>, Vec<f64>) {
    let (b1, b2) = cfg.adam_betas;
    let n = cfg.iterations_per_stage;
    let mut x = x0;
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut losses = Vec::new();
    for t in 0..n {
        let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / n as f64).cos());
        let (loss, g) = net.loss_and_grad(&x, cfg.target_class);
        losses.push(loss);
        let k = (t + 1) as i32;
        for i in 0..x.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(k));
            let vh = v[i] / (1.0 - b2.powi(k));
            x[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    (x, losses)
}

#[test]
fn engine_reduces_to_plain_adam() {
    let net = Arc::new(TwoLayer::new(5));
    let handle = ClassifierHandle::new("two_layer", net.clone(), None);
    let cfg = InversionConfig {
        target_class: 2,
        resolution: R,
        n_stages: 1,
        schedule_mode: ScheduleMode::None,
        iterations_per_stage: 50,
        learning_rate: 0.05,
        weights: RegularizerWeights::default(),
        augmentation: AugmentationSpec {
            alpha: 0.0,
            beta: 0.0,
            ensemble_size: 1,
            jitter_max: Some(0),
            ..Default::default()
        },
        seed: 13,
        apply_normalization: false,
        ..Default::default()
    };
    let result = invert(&handle, &cfg).unwrap();

    let x0 = Tensor::randn(&[C, R, R], &mut ChaCha8Rng::seed_from_u64(cfg.seed)).into_data();
    let (x, losses) = reference_run(&net, x0, &cfg);

    assert_eq!(result.loss_trace.len(), 50);
    for (step, (rec, want)) in result.loss_trace.iter().zip(&losses).enumerate() {
        assert!((rec.nll - want).abs() < 1e-6, "step {step}: {} vs {want}", rec.nll);
        assert!((rec.total - rec.nll).abs() < 1e-12);
    }
    let diff = result
        .image
        .pixels()
        .data()
        .iter()
        .zip(&x)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-6, "final image differs by {diff}");
    // the run actually moved
    assert!(losses[49] < losses[0]);
}
