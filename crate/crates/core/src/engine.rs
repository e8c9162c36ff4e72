//! The inversion loop: staged resolution growth, jitter plus ensemble
//! augmentation, Adam with a per-stage cosine schedule.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_members, sample_members, MemberTransform, Shift};
use crate::config::{
    validate_config, AugmentationSpec, ImageState, InversionConfig, InversionResult, LossRecord, RegularizerWeights,
};
use crate::error::{PiiError, Result};
use crate::models::{cross_entropy, ClassifierHandle};
use crate::regularizers::{
    compose_loss, feature_regularizer_grad, l2_penalty, l2_penalty_grad, total_variation, total_variation_grad,
    RegularizerValues,
};
use crate::schedule::apply_stage;
use crate::tensor::Tensor;

const ADAM_EPS: f64 = 1e-8;

/// Cosine decay from `lr0` at iteration 0 towards zero at `total`.
pub fn cosine_lr(iteration: usize, total: usize, lr0: f64) -> Result<f64> {
    if iteration >= total {
        return Err(PiiError::Parameter(format!(
            "iteration {iteration} outside a schedule of {total} steps"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * iteration as f64 / total as f64).cos()))
}

/// Adam moments for one image; recreated at each stage.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    pub fn new(len: usize, betas: (f64, f64)) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Bias-corrected update of `x` in place.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if x.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(PiiError::Shape(format!(
                "optimizer holds {} moments, got {} values and {} gradients",
                self.m.len(),
                x.len(),
                grad.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// What stays fixed across the steps of one inversion.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub model: &'a ClassifierHandle,
    pub target: usize,
    pub spec: &'a AugmentationSpec,
    pub weights: &'a RegularizerWeights,
    pub normalize: bool,
}

/// Itemized objective value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub tv: f64,
    pub l2: f64,
    pub feat: Option<f64>,
    pub total: f64,
}

/// Objective and its gradient at `x` for fixed random draws: the jitter
/// `shift`, then one view per member transform.
pub fn objective(x: &Tensor, ctx: &StepContext, shift: Shift, members: &[MemberTransform]) -> Result<(LossParts, Tensor)> {
    if members.is_empty() {
        return Err(PiiError::Parameter("ensemble_size must be ≥ 1".into()));
    }
    let jittered = shift.apply(x)?;
    let batch = apply_members(&jittered, members)?;
    let fwd = ctx.model.forward(&batch, ctx.normalize)?;
    let targets = vec![ctx.target; members.len()];
    let (nll, dlogits) = cross_entropy(fwd.logits(), &targets)?;
    let gbatch = fwd.input_grad(Some(&dlogits), &[])?;
    let mut gj = Tensor::zeros(x.shape());
    for (i, m) in members.iter().enumerate() {
        gj.add_assign(&m.adjoint(&gbatch.index_outer(i))?);
    }
    let mut grad = shift.adjoint(&gj)?;

    let w = ctx.weights;
    let tv = if w.tv > 0.0 {
        let (v, g) = total_variation_grad(x)?;
        grad.add_scaled(&g, w.tv);
        v
    } else {
        total_variation(x)?
    };
    let l2 = if w.l2 > 0.0 {
        let (v, g) = l2_penalty_grad(x);
        grad.add_scaled(&g, w.l2);
        v
    } else {
        l2_penalty(x)
    };
    let feat = if w.feature > 0.0 {
        let stats = ctx.model.bn_stats().ok_or_else(|| no_bn(ctx.model))?;
        let single = x.clone().reshape(&[1, x.shape()[0], x.shape()[1], x.shape()[2]])?;
        let f = ctx.model.forward(&single, ctx.normalize)?;
        let taps: Vec<Tensor> = f.taps().into_iter().cloned().collect();
        let (v, dtaps) = feature_regularizer_grad(&taps, stats)?;
        let g = f.input_grad(None, &dtaps)?;
        grad.add_scaled(&g.reshape(x.shape())?, w.feature);
        Some(v)
    } else {
        None
    };
    let values = RegularizerValues {
        tv,
        l2,
        feature: feat.unwrap_or(0.0),
    };
    let total = compose_loss(nll, w, &values);
    Ok((LossParts { nll, tv, l2, feat, total }, grad))
}

fn no_bn(model: &ClassifierHandle) -> PiiError {
    PiiError::Capability(format!(
        "model `{}` has no BatchNorm statistics, so the feature regularizer cannot be used",
        model.name()
    ))
}

/// Ensemble transforms shared across consecutive steps when the redraw
/// period is above one.
#[derive(Clone, Debug, Default)]
pub struct MemberCache {
    members: Option<(usize, Vec<MemberTransform>)>,
    age: usize,
}

impl MemberCache {
    fn get<R: Rng + ?Sized>(
        &mut self,
        spec: &AugmentationSpec,
        channels: usize,
        side: usize,
        rng: &mut R,
    ) -> Result<Vec<MemberTransform>> {
        let stale = match &self.members {
            Some((s, _)) => *s != side || self.age >= spec.redraw_period.max(1),
            None => true,
        };
        if stale {
            self.members = Some((side, sample_members(spec, channels, side, rng)?));
            self.age = 0;
        }
        self.age += 1;
        Ok(self.members.as_ref().unwrap().1.clone())
    }
}

/// Result of one optimizer step, including the random draws it used.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub image: ImageState,
    pub parts: LossParts,
    pub shift: Shift,
    pub members: Vec<MemberTransform>,
}

/// One update: draw a jitter and the ensemble, evaluate the objective and
/// take an Adam step of size `lr`.
pub fn step<R: Rng + ?Sized>(
    state: &ImageState,
    ctx: &StepContext,
    opt: &mut Adam,
    lr: f64,
    cache: &mut MemberCache,
    rng: &mut R,
) -> Result<StepOutput> {
    let x = state.pixels();
    let side = state.resolution();
    let shift = Shift::sample(ctx.spec.jitter_for(side), side, rng)?;
    let members = cache.get(ctx.spec, state.channels(), side, rng)?;
    let (parts, grad) = objective(x, ctx, shift, &members)?;
    let iteration = opt.steps_taken();
    let divergence = |detail: String| PiiError::Divergence {
        stage: state.stage_index,
        iteration,
        detail,
    };
    if !parts.total.is_finite() || !parts.nll.is_finite() {
        return Err(divergence(format!("loss became non-finite (total {})", parts.total)));
    }
    if !grad.all_finite() {
        return Err(divergence("gradient became non-finite".into()));
    }
    let mut next = x.clone();
    opt.step(next.data_mut(), grad.data(), lr)?;
    if !next.all_finite() {
        return Err(divergence("image became non-finite".into()));
    }
    Ok(StepOutput {
        image: ImageState::new(next, state.stage_index)?,
        parts,
        shift,
        members,
    })
}

/// Progress notifications emitted by [`invert_with`].
#[derive(Clone, Debug)]
pub enum Progress<'a> {
    StageStart { stage: usize, resolution: usize },
    Step(&'a LossRecord),
}

/// Optimizes one stage for `iterations` steps with a fresh optimizer.
#[allow(clippy::too_many_arguments)]
pub fn run_stage<R: Rng + ?Sized>(
    state: ImageState,
    ctx: &StepContext,
    iterations: usize,
    lr0: f64,
    betas: (f64, f64),
    rng: &mut R,
    observer: &mut dyn FnMut(Progress),
) -> Result<(ImageState, Vec<LossRecord>)> {
    let mut opt = Adam::new(state.pixels().len(), betas);
    let mut cache = MemberCache::default();
    let mut state = state;
    let mut trace = Vec::with_capacity(iterations);
    for i in 0..iterations {
        let lr = cosine_lr(i, iterations, lr0)?;
        let out = step(&state, ctx, &mut opt, lr, &mut cache, rng)?;
        let rec = LossRecord {
            stage: state.stage_index,
            iteration: i,
            lr,
            nll: out.parts.nll,
            tv: out.parts.tv,
            l2: out.parts.l2,
            feat: out.parts.feat,
            total: out.parts.total,
        };
        observer(Progress::Step(&rec));
        trace.push(rec);
        state = out.image;
    }
    Ok((state, trace))
}

/// Checks that `model` can run `config`, returning the validated config.
pub fn check_capabilities(model: &ClassifierHandle, config: &InversionConfig) -> Result<InversionConfig> {
    let config = validate_config(config.clone())?;
    if config.target_class >= model.num_classes() {
        return Err(PiiError::Parameter(format!(
            "target class {} out of range for a {}-class model",
            config.target_class,
            model.num_classes()
        )));
    }
    if config.weights.feature > 0.0 && !model.has_bn_stats() {
        return Err(no_bn(model));
    }
    if !config.augmentation.baseline_augs.is_empty() && model.in_channels() != 3 {
        return Err(PiiError::Capability("baseline augmentations need RGB inputs".into()));
    }
    let plan = config.stage_plan()?;
    let first = plan.stages[0].pad_to;
    if first < model.min_resolution() {
        return Err(PiiError::Capability(format!(
            "model `{}` needs at least {}px but the first stage runs at {first}px; use fewer stages",
            model.name(),
            model.min_resolution()
        )));
    }
    Ok(config)
}

/// Inverts `model` for `config.target_class`, seeding all randomness from
/// `config.seed`.
pub fn invert(model: &ClassifierHandle, config: &InversionConfig) -> Result<InversionResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    invert_with(model, config, &mut rng, &mut |_| {})
}

pub fn invert_with<R: Rng + ?Sized>(
    model: &ClassifierHandle,
    config: &InversionConfig,
    rng: &mut R,
    observer: &mut dyn FnMut(Progress),
) -> Result<InversionResult> {
    let start = Instant::now();
    let config = check_capabilities(model, config)?;
    let plan = config.stage_plan()?;
    let c = model.in_channels();
    let r0 = plan.initial_resolution;
    let mut pixels = Tensor::randn(&[c, r0, r0], rng);
    let ctx = StepContext {
        model,
        target: config.target_class,
        spec: &config.augmentation,
        weights: &config.weights,
        normalize: config.apply_normalization,
    };
    let mut trace = Vec::with_capacity(plan.stages.len() * config.iterations_per_stage);
    for (s, stage) in plan.stages.iter().enumerate() {
        pixels = apply_stage(&pixels, stage, rng)?;
        observer(Progress::StageStart {
            stage: s,
            resolution: stage.pad_to,
        });
        let state = ImageState::new(pixels, s)?;
        let (state, t) = run_stage(
            state,
            &ctx,
            config.iterations_per_stage,
            config.learning_rate,
            config.adam_betas,
            rng,
            observer,
        )?;
        trace.extend(t);
        pixels = state.into_pixels();
    }
    let image = ImageState::new(pixels, plan.stages.len().saturating_sub(1))?;
    Ok(InversionResult {
        image,
        loss_trace: trace,
        seed: config.seed,
        config,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScheduleMode;
    use crate::models::toy::{random_handle, Arch};

    fn small_config() -> InversionConfig {
        InversionConfig {
            resolution: 16,
            n_stages: 2,
            iterations_per_stage: 3,
            augmentation: AugmentationSpec {
                ensemble_size: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.2).unwrap(), 0.2);
        assert!((cosine_lr(5, 10, 0.2).unwrap() - 0.1).abs() < 1e-15);
        assert!(cosine_lr(10, 10, 0.2).is_err());
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let v = cosine_lr(i, 50, 1.0).unwrap();
            assert!(v <= prev && v > 0.0);
            prev = v;
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(3, (0.5, 0.99));
        let mut x = vec![0.0, 1.0, 2.0];
        opt.step(&mut x, &[2.0, -0.5, 0.0], 0.1).unwrap();
        assert!((x[0] + 0.1).abs() < 1e-6);
        assert!((x[1] - 1.1).abs() < 1e-6);
        assert_eq!(x[2], 2.0);
        assert!(opt.step(&mut x, &[1.0], 0.1).is_err());
    }

    #[test]
    fn trace_covers_every_step_and_is_deterministic() {
        let model = random_handle(Arch::CnnBn, 4, 1).unwrap();
        let cfg = small_config();
        let a = invert(&model, &cfg).unwrap();
        let b = invert(&model, &cfg).unwrap();
        assert_eq!(a.loss_trace.len(), 6);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.image.pixels(), b.image.pixels());
        assert_eq!(a.image.resolution(), 16);
        let stages: Vec<_> = a.loss_trace.iter().map(|r| (r.stage, r.iteration)).collect();
        assert_eq!(stages, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
        assert!(a.loss_trace.iter().all(|r| r.feat.is_none()));
    }

    #[test]
    fn feature_weight_needs_batch_norm() {
        let model = random_handle(Arch::TinyMixer, 4, 1).unwrap();
        let mut cfg = small_config();
        cfg.weights.feature = 0.1;
        assert!(matches!(invert(&model, &cfg), Err(PiiError::Capability(_))));
        cfg.target_class = 9;
        cfg.weights.feature = 0.0;
        assert!(matches!(invert(&model, &cfg), Err(PiiError::Parameter(_))));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let model = random_handle(Arch::TinyMixer, 4, 1).unwrap();
        let mut cfg = small_config();
        cfg.learning_rate = 1e300;
        cfg.schedule_mode = ScheduleMode::None;
        match invert(&model, &cfg) {
            Err(PiiError::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn redraw_period_reuses_members() {
        let spec = AugmentationSpec {
            ensemble_size: 2,
            redraw_period: 3,
            ..Default::default()
        };
        let mut cache = MemberCache::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws: Vec<_> = (0..4).map(|_| cache.get(&spec, 3, 8, &mut rng).unwrap()).collect();
        assert_eq!(draws[0], draws[1]);
        assert_eq!(draws[1], draws[2]);
        assert_ne!(draws[2], draws[3]);
    }
}
