//! Small classifiers of three families (convolutional with BatchNorm,
//! attention over patches, token-mixing MLP) and a seeded training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::{argmax, cross_entropy, Classifier, ClassifierHandle, InputResolution, Normalization};
use crate::error::{PiiError, Result};
use crate::graph::{Graph, Var};
use crate::regularizers::{BatchNormStats, LayerStats};
use crate::tensor::Tensor;

const CNN_WIDTHS: [usize; 3] = [16, 32, 32];
const PATCH: usize = 4;
const NATIVE: usize = 32;
const DIM: usize = 32;
const HEADS: usize = 2;
const MLP: usize = 64;
const TOKEN_MLP: usize = 64;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    CnnBn,
    TinyAttention,
    TinyMixer,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::CnnBn, Arch::TinyAttention, Arch::TinyMixer];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::CnnBn => "cnn_bn",
            Arch::TinyAttention => "tiny_attention",
            Arch::TinyMixer => "tiny_mixer",
        }
    }

    pub fn has_batch_norm(self) -> bool {
        self == Arch::CnnBn
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = PiiError;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| PiiError::Parameter(format!("unknown architecture `{s}` (cnn_bn, tiny_attention, tiny_mixer)")))
    }
}

enum Init {
    Zero,
    One,
    Normal(f64),
}

fn layout(arch: Arch, k: usize) -> Vec<(String, Vec<usize>, Init)> {
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let lin = |v: &mut Vec<_>, name: &str, i: usize, o: usize| {
        v.push((format!("{name}.w"), vec![i, o], Init::Normal((1.0 / i as f64).sqrt())));
        v.push((format!("{name}.b"), vec![o], Init::Zero));
    };
    let norm = |v: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize| {
        v.push((format!("{name}.g"), vec![d], Init::One));
        v.push((format!("{name}.b"), vec![d], Init::Zero));
    };
    let tokens = (NATIVE / PATCH).pow(2);
    let patch_feats = 3 * PATCH * PATCH;
    match arch {
        Arch::CnnBn => {
            let mut cin = 3;
            for (i, w) in CNN_WIDTHS.iter().enumerate() {
                let fan = cin * 9;
                v.push((format!("conv{i}.w"), vec![*w, cin, 3, 3], Init::Normal((2.0 / fan as f64).sqrt())));
                v.push((format!("conv{i}.b"), vec![*w], Init::Zero));
                norm(&mut v, &format!("bn{i}"), *w);
                cin = *w;
            }
            lin(&mut v, "head", cin, k);
        }
        Arch::TinyAttention => {
            lin(&mut v, "embed", patch_feats, DIM);
            v.push(("pos".into(), vec![tokens, DIM], Init::Normal(0.1)));
            norm(&mut v, "ln1", DIM);
            for n in ["q", "k", "v", "o"] {
                lin(&mut v, n, DIM, DIM);
            }
            norm(&mut v, "ln2", DIM);
            lin(&mut v, "mlp1", DIM, MLP);
            lin(&mut v, "mlp2", MLP, DIM);
            norm(&mut v, "lnf", DIM);
            lin(&mut v, "head", DIM, k);
        }
        Arch::TinyMixer => {
            lin(&mut v, "embed", patch_feats, DIM);
            norm(&mut v, "ln1", DIM);
            lin(&mut v, "tok1", tokens, TOKEN_MLP);
            lin(&mut v, "tok2", TOKEN_MLP, tokens);
            norm(&mut v, "ln2", DIM);
            lin(&mut v, "ch1", DIM, MLP);
            lin(&mut v, "ch2", MLP, DIM);
            norm(&mut v, "lnf", DIM);
            lin(&mut v, "head", DIM, k);
        }
    }
    v
}

#[derive(Clone, Debug)]
pub struct ToyNet {
    arch: Arch,
    num_classes: usize,
    params: BTreeMap<String, Tensor>,
    bn: Option<BatchNormStats>,
}

struct Trace {
    logits: Var,
    taps: Vec<Var>,
    params: BTreeMap<String, Var>,
    batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ToyNet {
    /// Randomly initialized network.
    pub fn init(arch: Arch, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(PiiError::Parameter("a classifier needs at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape, init) in layout(arch, num_classes) {
            let t = match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::One => Tensor::full(&shape, 1.0),
                Init::Normal(s) => Tensor::randn(&shape, &mut rng).scale(s),
            };
            params.insert(name, t);
        }
        let bn = arch.has_batch_norm().then(|| BatchNormStats {
            layers: CNN_WIDTHS
                .iter()
                .map(|w| LayerStats {
                    mean: vec![0.0; *w],
                    var: vec![1.0; *w],
                })
                .collect(),
        });
        Ok(Self {
            arch,
            num_classes,
            params,
            bn,
        })
    }

    /// Rebuilds a network from named tensors (parameters plus
    /// `bn{i}.running_mean` / `bn{i}.running_var` for BatchNorm models).
    pub fn from_tensors(arch: Arch, num_classes: usize, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, shape, _) in layout(arch, num_classes) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| PiiError::Format(format!("missing tensor `{name}` for {arch}")))?;
            if t.shape() != shape.as_slice() {
                return Err(PiiError::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.insert(name, t);
        }
        let bn = if arch.has_batch_norm() {
            let mut layers = Vec::new();
            for (i, w) in CNN_WIDTHS.iter().enumerate() {
                let mut get = |n: &str| {
                    tensors
                        .remove(&format!("bn{i}.{n}"))
                        .filter(|t| t.len() == *w)
                        .map(Tensor::into_data)
                        .ok_or_else(|| PiiError::Format(format!("missing or malformed `bn{i}.{n}`")))
                };
                let mean = get("running_mean")?;
                let var = get("running_var")?;
                layers.push(LayerStats { mean, var });
            }
            Some(BatchNormStats::new(layers)?)
        } else {
            None
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(PiiError::Format(format!("unexpected tensor `{extra}` for {arch}")));
        }
        Ok(Self {
            arch,
            num_classes,
            params,
            bn,
        })
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.params.clone();
        if let Some(bn) = &self.bn {
            for (i, l) in bn.layers.iter().enumerate() {
                out.insert(format!("bn{i}.running_mean"), Tensor::from_parts(vec![l.mean.len()], l.mean.clone()));
                out.insert(format!("bn{i}.running_var"), Tensor::from_parts(vec![l.var.len()], l.var.clone()));
            }
        }
        out
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn into_handle(self, name: impl Into<String>, normalization: Option<Normalization>) -> ClassifierHandle {
        ClassifierHandle::new(name, Arc::new(self), normalization)
    }

    fn run(&self, g: &mut Graph, x: Var, train: bool) -> Result<Trace> {
        let params: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(t.clone(), train)))
            .collect();
        let p = |n: &str| params[n];
        let mut taps = Vec::new();
        let mut batch_stats = Vec::new();
        let logits = match self.arch {
            Arch::CnnBn => {
                let mut h = x;
                for i in 0..CNN_WIDTHS.len() {
                    h = g.conv2d(h, p(&format!("conv{i}.w")), p(&format!("conv{i}.b")))?;
                    taps.push(h);
                    let (gm, bt) = (p(&format!("bn{i}.g")), p(&format!("bn{i}.b")));
                    h = if train {
                        let (y, m, v) = g.batch_norm_train(h, gm, bt)?;
                        batch_stats.push((m, v));
                        y
                    } else {
                        let l = &self.bn.as_ref().expect("batch-norm model without statistics").layers[i];
                        g.batch_norm_eval(h, gm, bt, &l.mean, &l.var)?
                    };
                    h = g.relu(h);
                    if i + 1 < CNN_WIDTHS.len() {
                        h = g.max_pool2(h)?;
                    }
                }
                let pooled = g.global_avg_pool(h)?;
                g.linear(pooled, p("head.w"), Some(p("head.b")))?
            }
            Arch::TinyAttention => {
                let patches = g.patchify(x, PATCH)?;
                let mut e = g.linear(patches, p("embed.w"), Some(p("embed.b")))?;
                e = g.add_broadcast(e, p("pos"))?;
                let h = g.layer_norm(e, p("ln1.g"), p("ln1.b"))?;
                let q = g.linear(h, p("q.w"), Some(p("q.b")))?;
                let k = g.linear(h, p("k.w"), Some(p("k.b")))?;
                let v = g.linear(h, p("v.w"), Some(p("v.b")))?;
                let a = g.attention(q, k, v, HEADS)?;
                let a = g.linear(a, p("o.w"), Some(p("o.b")))?;
                e = g.add(e, a)?;
                let h = g.layer_norm(e, p("ln2.g"), p("ln2.b"))?;
                let h = g.linear(h, p("mlp1.w"), Some(p("mlp1.b")))?;
                let h = g.gelu(h);
                let h = g.linear(h, p("mlp2.w"), Some(p("mlp2.b")))?;
                e = g.add(e, h)?;
                let e = g.layer_norm(e, p("lnf.g"), p("lnf.b"))?;
                let m = g.mean_axis1(e)?;
                g.linear(m, p("head.w"), Some(p("head.b")))?
            }
            Arch::TinyMixer => {
                let patches = g.patchify(x, PATCH)?;
                let mut e = g.linear(patches, p("embed.w"), Some(p("embed.b")))?;
                let h = g.layer_norm(e, p("ln1.g"), p("ln1.b"))?;
                let t = g.transpose12(h)?;
                let t = g.linear(t, p("tok1.w"), Some(p("tok1.b")))?;
                let t = g.gelu(t);
                let t = g.linear(t, p("tok2.w"), Some(p("tok2.b")))?;
                let t = g.transpose12(t)?;
                e = g.add(e, t)?;
                let h = g.layer_norm(e, p("ln2.g"), p("ln2.b"))?;
                let h = g.linear(h, p("ch1.w"), Some(p("ch1.b")))?;
                let h = g.gelu(h);
                let h = g.linear(h, p("ch2.w"), Some(p("ch2.b")))?;
                e = g.add(e, h)?;
                let e = g.layer_norm(e, p("lnf.g"), p("lnf.b"))?;
                let m = g.mean_axis1(e)?;
                g.linear(m, p("head.w"), Some(p("head.b")))?
            }
        };
        Ok(Trace {
            logits,
            taps,
            params,
            batch_stats,
        })
    }
}

impl Classifier for ToyNet {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_resolution(&self) -> InputResolution {
        match self.arch {
            Arch::CnnBn => InputResolution::Any { min: 4 },
            _ => InputResolution::Fixed(NATIVE),
        }
    }

    fn bn_stats(&self) -> Option<&BatchNormStats> {
        self.bn.as_ref()
    }

    fn build(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        let t = self.run(g, x, false)?;
        Ok((t.logits, t.taps))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Random horizontal flips of training images.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 0,
            flip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
}

fn flip_image(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw().unwrap();
    let mut out = x.clone();
    for p in 0..c * h {
        out.data_mut()[p * w..(p + 1) * w].reverse();
    }
    out
}

/// Trains a network of the given family on `train` and reports top-1
/// accuracy on `test`. Fully deterministic for a fixed seed.
pub fn train(
    arch: Arch,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Trained> {
    if train.is_empty() || cfg.batch_size < 2 || cfg.epochs == 0 {
        return Err(PiiError::Parameter(
            "training needs data, a batch size of at least 2 and one epoch".into(),
        ));
    }
    let k = train.num_classes();
    let mut net = ToyNet::init(arch, k, cfg.seed)?;
    let (mean, std) = train.channel_moments();
    let norm = Normalization::new(mean, std)?;
    let normalized: Vec<Tensor> = train.images.iter().map(|x| norm.apply(x)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let names: Vec<String> = net.params.keys().cloned().collect();
    let mut m1: Vec<Vec<f64>> = names.iter().map(|n| vec![0.0; net.params[n].len()]).collect();
    let mut m2 = m1.clone();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs) as f64;
    let mut t = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let imgs: Vec<Tensor> = chunk
                .iter()
                .map(|i| {
                    if cfg.flip && rng.random::<bool>() {
                        flip_image(&normalized[*i])
                    } else {
                        normalized[*i].clone()
                    }
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|i| train.labels[*i]).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::stack(&imgs)?);
            let tr = net.run(&mut g, x, true)?;
            let (loss, dlogits) = cross_entropy(g.value(tr.logits), &labels)?;
            if !loss.is_finite() {
                return Err(PiiError::Divergence {
                    stage: 0,
                    iteration: t,
                    detail: "training loss became non-finite".into(),
                });
            }
            last_loss = loss;
            let grads = g.backward(&[(tr.logits, dlogits)])?;
            t += 1;
            let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * (t - 1) as f64 / total).cos());
            let (c1, c2) = (1.0 - f64::powi(b1, t as i32), 1.0 - f64::powi(b2, t as i32));
            for (pi, name) in names.iter().enumerate() {
                let Some(gr) = grads.get(tr.params[name]) else { continue };
                let p = net.params.get_mut(name).unwrap().data_mut();
                for ((w, gv), (a, b)) in p.iter_mut().zip(gr.data()).zip(m1[pi].iter_mut().zip(m2[pi].iter_mut())) {
                    *a = b1 * *a + (1.0 - b1) * gv;
                    *b = b2 * *b + (1.0 - b2) * gv * gv;
                    *w -= lr * (*a / c1) / ((*b / c2).sqrt() + eps);
                }
            }
            if let Some(bn) = net.bn.as_mut() {
                for ((layer, (m, v)), tap) in bn.layers.iter_mut().zip(&tr.batch_stats).zip(&tr.taps) {
                    let s = g.value(*tap).shape();
                    let count = s[0] * s[2..].iter().product::<usize>();
                    for c in 0..m.len() {
                        let unbiased = v[c] * count as f64 / (count as f64 - 1.0);
                        layer.mean[c] = (1.0 - BN_MOMENTUM) * layer.mean[c] + BN_MOMENTUM * m[c];
                        layer.var[c] = (1.0 - BN_MOMENTUM) * layer.var[c] + BN_MOMENTUM * unbiased;
                    }
                }
            }
        }
    }
    let handle = net.clone().into_handle(default_name(arch, &train.name, cfg.seed), Some(norm.clone()));
    let report = TrainReport {
        train_accuracy: accuracy(&handle, train)?,
        test_accuracy: accuracy(&handle, test)?,
        final_loss: last_loss,
    };
    Ok(Trained {
        net,
        normalization: norm,
        report,
    })
}

pub fn default_name(arch: Arch, dataset: &str, seed: u64) -> String {
    format!("{arch}_{dataset}_s{seed}")
}

/// Output of [`train`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub net: ToyNet,
    pub normalization: Normalization,
    pub report: TrainReport,
}

impl Trained {
    pub fn handle(&self, name: impl Into<String>) -> ClassifierHandle {
        self.net.clone().into_handle(name, Some(self.normalization.clone()))
    }
}

/// Top-1 accuracy of `handle` on a dataset, with input normalization.
pub fn accuracy(handle: &ClassifierHandle, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (batch, labels) = data.batch(&idx)?;
    let logits = handle.logits(&batch, true)?;
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(&labels)
        .filter(|(row, y)| argmax(row) == **y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Draws weights for an untrained network; handy for tests that only need a
/// differentiable classifier.
pub fn random_handle(arch: Arch, num_classes: usize, seed: u64) -> Result<ClassifierHandle> {
    let mut net = ToyNet::init(arch, num_classes, seed)?;
    if let Some(bn) = net.bn.as_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let noise = Normal::new(0.0, 0.1).unwrap();
        for l in &mut bn.layers {
            l.mean.iter_mut().for_each(|m| *m = noise.sample(&mut rng));
            l.var.iter_mut().for_each(|v| *v = 1.0 + noise.sample(&mut rng).abs());
        }
    }
    Ok(net.into_handle(format!("{arch}_random_s{seed}"), None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::data::shapes10;

    #[test]
    fn tensors_round_trip() {
        for arch in Arch::ALL {
            let net = ToyNet::init(arch, 10, 3).unwrap();
            let back = ToyNet::from_tensors(arch, 10, net.to_tensors()).unwrap();
            assert_eq!(back.params, net.params);
            assert_eq!(back.bn, net.bn);
            let mut t = net.to_tensors();
            t.insert("bogus".into(), Tensor::zeros(&[1]));
            assert!(ToyNet::from_tensors(arch, 10, t).is_err());
        }
    }

    #[test]
    fn fixed_resolution_models_resize_any_input() {
        let h = random_handle(Arch::TinyAttention, 10, 0).unwrap();
        let x = Tensor::zeros(&[2, 3, 20, 20]);
        assert_eq!(h.logits(&x, true).unwrap().shape(), &[2, 10]);
        let c = random_handle(Arch::CnnBn, 10, 0).unwrap();
        assert!(c.logits(&Tensor::zeros(&[1, 3, 3, 3]), true).is_err());
        assert_eq!(c.logits(&Tensor::zeros(&[1, 3, 9, 9]), true).unwrap().shape(), &[1, 10]);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for arch in Arch::ALL {
            let h = random_handle(arch, 10, 2).unwrap();
            let x = Tensor::randn(&[1, 3, 12, 12], &mut rng);
            let f = h.forward(&x, true).unwrap();
            let (_, dl) = cross_entropy(f.logits(), &[3]).unwrap();
            let g = f.input_grad(Some(&dl), &[]).unwrap();
            let loss = |x: &Tensor| cross_entropy(&h.logits(x, true).unwrap(), &[3]).unwrap().0;
            for idx in [0, 17, 200, 431] {
                let mut p = x.clone();
                p.data_mut()[idx] += 1e-5;
                let mut m = x.clone();
                m.data_mut()[idx] -= 1e-5;
                let fd = (loss(&p) - loss(&m)) / 2e-5;
                let an = g.data()[idx];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{arch} {idx}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn short_training_beats_chance() {
        let tr = shapes10(300, 1);
        let te = shapes10(100, 2);
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let t = train(Arch::CnnBn, &tr, &te, &cfg).unwrap();
        assert!(t.report.test_accuracy > 0.3, "{:?}", t.report);
        assert!(t.handle("m").has_bn_stats());
        let again = train(Arch::CnnBn, &tr, &te, &cfg).unwrap();
        assert_eq!(t.report, again.report);
    }
}
