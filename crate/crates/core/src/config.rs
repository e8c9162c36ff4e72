//! Shared domain types, configuration validation and the flat `key = value`
//! config file format.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{PiiError, Result};
use crate::schedule;
use crate::tensor::Tensor;

/// The image being optimized, in an unbounded real-valued pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageState {
    pixels: Tensor,
    pub stage_index: usize,
}

impl ImageState {
    pub fn new(pixels: Tensor, stage_index: usize) -> Result<Self> {
        let (_, h, w) = pixels.chw()?;
        if h != w {
            return Err(PiiError::Shape(format!("images must be square, got {h}x{w}")));
        }
        if h == 0 {
            return Err(PiiError::Shape("empty image".into()));
        }
        if !pixels.all_finite() {
            return Err(PiiError::Parameter("image contains non-finite pixels".into()));
        }
        Ok(Self {
            pixels,
            stage_index,
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    /// Side length; images are always square.
    pub fn resolution(&self) -> usize {
        self.pixels.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    ZoomAndCenter,
    ZoomOnly,
    CenterOnly,
    None,
}

impl ScheduleMode {
    pub const ALL: [ScheduleMode; 4] = [
        ScheduleMode::ZoomOnly,
        ScheduleMode::ZoomAndCenter,
        ScheduleMode::CenterOnly,
        ScheduleMode::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleMode::ZoomAndCenter => "zoom_and_center",
            ScheduleMode::ZoomOnly => "zoom_only",
            ScheduleMode::CenterOnly => "center_only",
            ScheduleMode::None => "none",
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleMode {
    type Err = PiiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zoom_and_center" | "z+c" | "Z+C" => Ok(ScheduleMode::ZoomAndCenter),
            "zoom_only" | "zoom" | "z" | "Z" => Ok(ScheduleMode::ZoomOnly),
            "center_only" | "center" | "c" | "C" => Ok(ScheduleMode::CenterOnly),
            "none" => Ok(ScheduleMode::None),
            other => Err(PiiError::Parameter(format!(
                "unknown schedule mode {other:?} (expected zoom_and_center, zoom_only, center_only or none)"
            ))),
        }
    }
}

/// One round of the staged procedure: grow to `upsample_to` by resampling,
/// then to `pad_to` by noise padding, then optimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub upsample_to: usize,
    pub pad_to: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub final_resolution: usize,
    /// Side length of the randomly initialized starting image.
    pub initial_resolution: usize,
    pub stages: Vec<Stage>,
    pub mode: ScheduleMode,
}

impl StagePlan {
    /// Checks the ordering invariants shared by every mode.
    pub fn check(&self) -> Result<()> {
        let last = self
            .stages
            .last()
            .ok_or_else(|| PiiError::Parameter("stage plan has no stages".into()))?;
        if last.pad_to != self.final_resolution {
            return Err(PiiError::Parameter(format!(
                "last stage pads to {} but the final resolution is {}",
                last.pad_to, self.final_resolution
            )));
        }
        let mut prev = self.initial_resolution;
        for (i, st) in self.stages.iter().enumerate() {
            if st.upsample_to > st.pad_to || st.upsample_to < prev {
                return Err(PiiError::Parameter(format!(
                    "stage {i}: need {prev} <= upsample_to ({}) <= pad_to ({})",
                    st.upsample_to, st.pad_to
                )));
            }
            if i > 0 && st.pad_to <= prev {
                return Err(PiiError::Parameter(format!(
                    "stage {i}: pad_to {} does not increase past {prev}",
                    st.pad_to
                )));
            }
            prev = st.pad_to;
        }
        Ok(())
    }

    /// The smallest side length the optimizer ever works at.
    pub fn smallest_working_resolution(&self) -> usize {
        self.stages.first().map(|s| s.pad_to).unwrap_or(self.final_resolution)
    }
}

/// Conventional augmentations that can replace or accompany ColorShift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineAugKind {
    RandomResizedCrop,
    HorizontalFlip,
    ColorJitter,
    Grayscale,
}

impl BaselineAugKind {
    pub const ALL: [BaselineAugKind; 4] = [
        BaselineAugKind::RandomResizedCrop,
        BaselineAugKind::HorizontalFlip,
        BaselineAugKind::ColorJitter,
        BaselineAugKind::Grayscale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineAugKind::RandomResizedCrop => "crop",
            BaselineAugKind::HorizontalFlip => "flip",
            BaselineAugKind::ColorJitter => "color_jitter",
            BaselineAugKind::Grayscale => "grayscale",
        }
    }
}

impl fmt::Display for BaselineAugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineAugKind {
    type Err = PiiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crop" | "random_resized_crop" => Ok(BaselineAugKind::RandomResizedCrop),
            "flip" | "horizontal_flip" => Ok(BaselineAugKind::HorizontalFlip),
            "color_jitter" => Ok(BaselineAugKind::ColorJitter),
            "grayscale" | "gray" => Ok(BaselineAugKind::Grayscale),
            other => Err(PiiError::Parameter(format!(
                "unknown augmentation kind {other:?} (expected flip, crop, grayscale or color_jitter)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// ColorShift mean bound: mu ~ U(-alpha, alpha).
    pub alpha: f64,
    /// ColorShift log-scale bound: sigma = exp(U(-beta, beta)).
    pub beta: f64,
    pub ensemble_size: usize,
    /// Jitter amplitude in pixels; `None` means `resolution / 8` at each stage.
    pub jitter_max: Option<usize>,
    pub baseline_augs: BTreeSet<BaselineAugKind>,
    /// Number of iterations between ColorShift redraws.
    pub redraw_period: usize,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            ensemble_size: 32,
            jitter_max: None,
            baseline_augs: BTreeSet::new(),
            redraw_period: 1,
        }
    }
}

impl AugmentationSpec {
    pub fn color_shift_enabled(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }

    pub fn jitter_for(&self, resolution: usize) -> usize {
        self.jitter_max.unwrap_or(resolution / 8)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegularizerWeights {
    pub tv: f64,
    pub l2: f64,
    pub feature: f64,
}

impl RegularizerWeights {
    pub fn is_zero(&self) -> bool {
        self.tv == 0.0 && self.l2 == 0.0 && self.feature == 0.0
    }
}

/// A complete inversion recipe. `Default` is the plug-in inversion recipe:
/// seven zoom+centering stages of 400 Adam steps, no regularizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub target_class: usize,
    pub resolution: usize,
    pub n_stages: usize,
    pub schedule_mode: ScheduleMode,
    pub iterations_per_stage: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub weights: RegularizerWeights,
    pub augmentation: AugmentationSpec,
    pub seed: u64,
    pub apply_normalization: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            target_class: 0,
            resolution: 224,
            n_stages: 7,
            schedule_mode: ScheduleMode::ZoomAndCenter,
            iterations_per_stage: 400,
            learning_rate: 0.01,
            adam_betas: (0.5, 0.99),
            weights: RegularizerWeights::default(),
            augmentation: AugmentationSpec::default(),
            seed: 0,
            apply_normalization: true,
        }
    }
}

impl InversionConfig {
    pub fn stage_plan(&self) -> Result<StagePlan> {
        schedule::plan_stages(self.resolution, self.n_stages, self.schedule_mode)
    }

    pub fn total_iterations(&self) -> Result<usize> {
        Ok(self.stage_plan()?.stages.len() * self.iterations_per_stage)
    }
}

/// One violated invariant, keyed by the offending field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Returns the config unchanged when every invariant holds, otherwise the full
/// list of violations.
pub fn validate_config(config: InversionConfig) -> Result<InversionConfig> {
    let mut v = Vec::new();
    let aug = &config.augmentation;

    if aug.ensemble_size < 1 {
        v.push(Violation::new("ensemble_size", "ensemble_size must be ≥ 1"));
    }
    if !(aug.alpha.is_finite() && aug.alpha >= 0.0) {
        v.push(Violation::new("alpha", "alpha must be a nonnegative real"));
    }
    if !(aug.beta.is_finite() && aug.beta >= 0.0) {
        v.push(Violation::new("beta", "beta must be a nonnegative real"));
    }
    if aug.redraw_period < 1 {
        v.push(Violation::new("redraw_period", "redraw_period must be ≥ 1"));
    }
    for (field, w) in [
        ("tv_weight", config.weights.tv),
        ("l2_weight", config.weights.l2),
        ("feature_weight", config.weights.feature),
    ] {
        if !(w.is_finite() && w >= 0.0) {
            v.push(Violation::new(field, "regularizer weight nonnegative"));
        }
    }
    if config.iterations_per_stage < 1 {
        v.push(Violation::new("iterations_per_stage", "iterations_per_stage must be ≥ 1"));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        v.push(Violation::new("learning_rate", "learning_rate must be positive"));
    }
    let (b1, b2) = config.adam_betas;
    if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
        v.push(Violation::new("adam_betas", "adam betas must lie in [0, 1)"));
    }
    match config.stage_plan() {
        Ok(plan) => {
            if let Some(j) = aug.jitter_max {
                let smallest = plan.smallest_working_resolution();
                if j >= smallest {
                    v.push(Violation::new(
                        "jitter",
                        format!("jitter {j} must be smaller than the smallest stage resolution {smallest}"),
                    ));
                }
            }
        }
        Err(e) => v.push(Violation::new("stages", e.to_string())),
    }

    if v.is_empty() {
        Ok(config)
    } else {
        Err(PiiError::Config(v))
    }
}

// ---------------------------------------------------------------------------
// flat key = value format

const KEYS: &[&str] = &[
    "target_class",
    "resolution",
    "stages",
    "schedule",
    "iterations_per_stage",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "tv_weight",
    "l2_weight",
    "feature_weight",
    "alpha",
    "beta",
    "ensemble_size",
    "jitter",
    "baseline_augs",
    "redraw_period",
    "seed",
    "apply_normalization",
];

impl InversionConfig {
    /// Serializes every field, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let aug = &self.augmentation;
        let jitter = aug
            .jitter_max
            .map(|j| j.to_string())
            .unwrap_or_else(|| "auto".into());
        let augs = if aug.baseline_augs.is_empty() {
            "none".to_string()
        } else {
            aug.baseline_augs
                .iter()
                .map(|k| k.as_str())
                .collect::<Vec<_>>()
                .join(",")
        };
        let values = [
            self.target_class.to_string(),
            self.resolution.to_string(),
            self.n_stages.to_string(),
            self.schedule_mode.to_string(),
            self.iterations_per_stage.to_string(),
            self.learning_rate.to_string(),
            self.adam_betas.0.to_string(),
            self.adam_betas.1.to_string(),
            self.weights.tv.to_string(),
            self.weights.l2.to_string(),
            self.weights.feature.to_string(),
            aug.alpha.to_string(),
            aug.beta.to_string(),
            aug.ensemble_size.to_string(),
            jitter,
            augs,
            aug.redraw_period.to_string(),
            self.seed.to_string(),
            self.apply_normalization.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parses a config file. Keys not present keep their values from `base`;
    /// unknown or repeated keys are errors. The result is not validated.
    pub fn from_text_with_base(text: &str, base: InversionConfig) -> Result<Self> {
        let mut cfg = base;
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PiiError::Format(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !KEYS.contains(&key) {
                return Err(PiiError::Format(format!(
                    "line {}: unknown key {key:?}",
                    lineno + 1
                )));
            }
            if !seen.insert(key.to_string()) {
                return Err(PiiError::Format(format!(
                    "line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| PiiError::Format(format!("line {}: {key}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_with_base(text, InversionConfig::default())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let aug = &mut self.augmentation;
        match key {
            "target_class" => self.target_class = parse(value)?,
            "resolution" => self.resolution = parse(value)?,
            "stages" => self.n_stages = parse(value)?,
            "schedule" => self.schedule_mode = value.parse()?,
            "iterations_per_stage" => self.iterations_per_stage = parse(value)?,
            "learning_rate" => self.learning_rate = parse(value)?,
            "adam_beta1" => self.adam_betas.0 = parse(value)?,
            "adam_beta2" => self.adam_betas.1 = parse(value)?,
            "tv_weight" => self.weights.tv = parse(value)?,
            "l2_weight" => self.weights.l2 = parse(value)?,
            "feature_weight" => self.weights.feature = parse(value)?,
            "alpha" => aug.alpha = parse(value)?,
            "beta" => aug.beta = parse(value)?,
            "ensemble_size" => aug.ensemble_size = parse(value)?,
            "jitter" => {
                aug.jitter_max = if value == "auto" {
                    None
                } else {
                    Some(parse(value)?)
                }
            }
            "baseline_augs" => {
                aug.baseline_augs = if value == "none" || value.is_empty() {
                    BTreeSet::new()
                } else {
                    value
                        .split(',')
                        .map(|s| s.trim().parse())
                        .collect::<Result<_>>()?
                }
            }
            "redraw_period" => aug.redraw_period = parse(value)?,
            "seed" => self.seed = parse(value)?,
            "apply_normalization" => self.apply_normalization = parse(value)?,
            other => return Err(PiiError::Format(format!("unknown key {other:?}"))),
        }
        Ok(())
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| PiiError::Format(format!("cannot parse {value:?}: {e}")))
}

/// Itemized loss for one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: usize,
    pub iteration: usize,
    pub lr: f64,
    pub nll: f64,
    pub tv: f64,
    pub l2: f64,
    /// `None` when the feature regularizer is disabled.
    pub feat: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct InversionResult {
    pub image: ImageState,
    pub loss_trace: Vec<LossRecord>,
    pub config: InversionConfig,
    pub elapsed: Duration,
    pub seed: u64,
}

impl InversionResult {
    pub fn final_record(&self) -> Option<&LossRecord> {
        self.loss_trace.last()
    }

    /// The trace as newline-delimited JSON records.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.loss_trace {
            out.push_str(&serde_json::to_string(r).expect("loss records serialize"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = InversionConfig::default();
        assert_eq!(cfg.augmentation.alpha, 1.0);
        assert_eq!(cfg.augmentation.beta, 1.0);
        assert_eq!(cfg.augmentation.ensemble_size, 32);
        assert_eq!(cfg.n_stages, 7);
        assert_eq!(cfg.iterations_per_stage, 400);
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.adam_betas, (0.5, 0.99));
        assert!(cfg.weights.is_zero());
        assert_eq!(validate_config(cfg.clone()).unwrap(), cfg);
    }

    #[test]
    fn zero_ensemble_is_reported() {
        let mut cfg = InversionConfig::default();
        cfg.augmentation.ensemble_size = 0;
        match validate_config(cfg) {
            Err(PiiError::Config(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].field, "ensemble_size");
                assert_eq!(v[0].message, "ensemble_size must be ≥ 1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_weight_is_reported() {
        let mut cfg = InversionConfig::default();
        cfg.weights.tv = -1.0;
        match validate_config(cfg) {
            Err(PiiError::Config(v)) => {
                assert_eq!(v[0].field, "tv_weight");
                assert_eq!(v[0].message, "regularizer weight nonnegative");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn every_violation_is_listed() {
        let mut cfg = InversionConfig::default();
        cfg.augmentation.ensemble_size = 0;
        cfg.weights.l2 = -2.0;
        cfg.learning_rate = 0.0;
        cfg.resolution = 100;
        let Err(PiiError::Config(v)) = validate_config(cfg) else {
            panic!("expected violations")
        };
        let fields: Vec<_> = v.iter().map(|x| x.field.as_str()).collect();
        assert_eq!(fields, ["ensemble_size", "l2_weight", "learning_rate", "stages"]);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_errors() {
        assert!(InversionConfig::from_text("colour = 3\n").is_err());
        assert!(InversionConfig::from_text("seed = 1\nseed = 2\n").is_err());
        assert!(InversionConfig::from_text("seed 1\n").is_err());
        let cfg = InversionConfig::from_text("# comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn image_state_rejects_non_square_and_nan() {
        assert!(ImageState::new(Tensor::zeros(&[3, 4, 5]), 0).is_err());
        let mut t = Tensor::zeros(&[3, 4, 4]);
        t.data_mut()[3] = f64::NAN;
        assert!(ImageState::new(t, 0).is_err());
        assert_eq!(ImageState::new(Tensor::zeros(&[3, 4, 4]), 0).unwrap().resolution(), 4);
    }

    fn arb_config() -> impl Strategy<Value = InversionConfig> {
        let res = prop_oneof![Just((224usize, 7usize)), Just((32, 4)), Just((48, 7)), Just((16, 1))];
        let modes = prop::sample::select(ScheduleMode::ALL.to_vec());
        let augs = prop::collection::btree_set(prop::sample::select(BaselineAugKind::ALL.to_vec()), 0..4);
        (
            (0usize..1000, res, modes, 1usize..500, 1e-5f64..1.0, 0.0f64..0.999, 0.0f64..0.999),
            (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
            (0.0f64..3.0, 0.0f64..3.0, 1usize..64, prop::option::of(0usize..2), augs, 1usize..10),
            (any::<u64>(), any::<bool>()),
        )
            .prop_map(|(a, w, g, (seed, norm))| InversionConfig {
                target_class: a.0,
                resolution: a.1 .0,
                n_stages: a.1 .1,
                schedule_mode: a.2,
                iterations_per_stage: a.3,
                learning_rate: a.4,
                adam_betas: (a.5, a.6),
                weights: RegularizerWeights {
                    tv: w.0,
                    l2: w.1,
                    feature: w.2,
                },
                augmentation: AugmentationSpec {
                    alpha: g.0,
                    beta: g.1,
                    ensemble_size: g.2,
                    jitter_max: g.3,
                    baseline_augs: g.4,
                    redraw_period: g.5,
                },
                seed,
                apply_normalization: norm,
            })
    }

    proptest! {
        #[test]
        fn text_round_trip(cfg in arb_config()) {
            let back = InversionConfig::from_text(&cfg.to_text()).unwrap();
            prop_assert_eq!(back, cfg);
        }

        #[test]
        fn validation_is_idempotent(cfg in arb_config()) {
            let once = validate_config(cfg.clone());
            match once {
                Ok(c) => prop_assert_eq!(validate_config(c.clone()).unwrap(), c),
                Err(PiiError::Config(v1)) => {
                    let Err(PiiError::Config(v2)) = validate_config(cfg) else { panic!() };
                    prop_assert_eq!(v1, v2);
                }
                Err(e) => panic!("{e}"),
            }
        }
    }
}
