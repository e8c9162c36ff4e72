//! Command-line front end: train toy classifiers, invert them, run ablation
//! sweeps and score the results.

pub mod evaluate;
pub mod invert;
pub mod presets;
pub mod sweep;
mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pii_core::PiiError;
use serde::Serialize;

pub use presets::Preset;
pub use sweep::{cell_seed, SweepAxis};

/// Environment variable for the trained-model directory.
pub use pii_core::models::weights::MODEL_DIR_ENV;

#[derive(Debug, Parser)]
#[command(name = "pii", version, about = "Class inversion of image classifiers")]
pub struct Cli {
    /// Directory holding `<name>.weights` / `<name>.json` model pairs.
    #[arg(long, global = true, env = MODEL_DIR_ENV, default_value = "models")]
    pub models_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a toy classifier and write its weights and manifest.
    Train(train::TrainArgs),
    /// Invert a model for one class.
    Invert(invert::InvertArgs),
    /// Run one inversion per value along an ablation axis.
    Sweep(sweep::SweepArgs),
    /// Score inverted images with one or more judge models.
    Evaluate(evaluate::EvaluateArgs),
    /// Print the configuration a preset and flags resolve to.
    Config(ConfigArgs),
}

/// Flags that map one-to-one onto configuration keys. Anything given here
/// overrides both the preset and `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// Starting recipe: pii, deepdream or deepinversion.
    #[arg(long, default_value = "pii")]
    pub preset: Preset,
    /// Config file of `key = value` lines, applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Target class.
    #[arg(long = "class")]
    pub class: Option<usize>,
    /// Final image side length.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub stages: Option<usize>,
    /// Schedule mode: zoom_and_center, zoom_only, center_only or none.
    #[arg(long)]
    pub mode: Option<String>,
    /// Iterations per stage.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// ColorShift mean amplitude.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// ColorShift log-scale amplitude.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Ensemble size.
    #[arg(long)]
    pub ensemble: Option<usize>,
    /// Jitter amplitude in pixels, or `auto` for an eighth of each stage.
    #[arg(long)]
    pub jitter: Option<String>,
    #[arg(long)]
    pub tv: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    /// Feature (BatchNorm statistics) regularizer weight.
    #[arg(long)]
    pub feat: Option<f64>,
    /// Extra augmentations: comma list of flip, crop, color_jitter, grayscale.
    #[arg(long)]
    pub augs: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, overrides_with = "no_normalize")]
    pub normalize: bool,
    #[arg(long = "no-normalize")]
    pub no_normalize: bool,
}

impl ConfigFlags {
    /// Explicit flags as configuration key/value pairs.
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        put("target_class", self.class.map(|v| v.to_string()));
        put("resolution", self.resolution.map(|v| v.to_string()));
        put("stages", self.stages.map(|v| v.to_string()));
        put("schedule", self.mode.clone());
        put("iterations_per_stage", self.iters.map(|v| v.to_string()));
        put("learning_rate", self.lr.map(|v| v.to_string()));
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("beta", self.beta.map(|v| v.to_string()));
        put("ensemble_size", self.ensemble.map(|v| v.to_string()));
        put("jitter", self.jitter.clone());
        put("tv_weight", self.tv.map(|v| v.to_string()));
        put("l2_weight", self.l2.map(|v| v.to_string()));
        put("feature_weight", self.feat.map(|v| v.to_string()));
        put("baseline_augs", self.augs.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        if self.normalize {
            put("apply_normalization", Some("true".into()));
        }
        if self.no_normalize {
            put("apply_normalization", Some("false".into()));
        }
        out
    }

    /// Preset, then config file, then explicit flags.
    pub fn resolve(&self) -> anyhow::Result<pii_core::InversionConfig> {
        let mut cfg = self.preset.config();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| PiiError::io(path, e))?;
            cfg = pii_core::InversionConfig::from_text_with_base(&text, cfg)?;
        }
        for (k, v) in self.overrides() {
            cfg.set(k, &v)
                .map_err(|e| PiiError::Format(format!("--{k}: {e}")))?;
        }
        Ok(pii_core::config::validate_config(cfg)?)
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train::run(&cli.models_dir, a),
        Command::Invert(a) => invert::run(&cli.models_dir, a),
        Command::Sweep(a) => sweep::run(&cli.models_dir, a),
        Command::Evaluate(a) => evaluate::run(&cli.models_dir, a),
        Command::Config(a) => {
            print!("{}", a.flags.resolve()?.to_text());
            Ok(())
        }
    }
}

/// Machine-readable failure description printed on stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

/// 1 for numerical divergence, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<PiiError>() {
        Some(PiiError::Divergence { .. }) => 1,
        _ => 2,
    }
}

pub fn error_record(err: &anyhow::Error) -> ErrorRecord {
    let kind = err
        .downcast_ref::<PiiError>()
        .map(|e| e.kind().to_string())
        .unwrap_or_else(|| "other".into());
    ErrorRecord {
        kind,
        message: format!("{err:#}"),
        exit_code: exit_code(err),
    }
}
