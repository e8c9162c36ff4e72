use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use pii_core::engine::{invert_with, Progress};
use pii_core::eval::{export_image, judge_scores, Sidecar};
use pii_core::models::load_model;
use pii_core::{ClassifierHandle, InversionConfig, InversionResult, PiiError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ConfigFlags;

#[derive(Debug, Args)]
pub struct InvertArgs {
    /// Name of the model to invert.
    #[arg(long)]
    pub model: String,
    #[command(flatten)]
    pub flags: ConfigFlags,
    /// Output directory, or a `.png` path.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Extra models that score the result, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub judges: Vec<String>,
    /// Print one line per stage to stderr.
    #[arg(long, short)]
    pub verbose: bool,
}

pub(crate) fn load_models(dir: &Path, names: &[String]) -> anyhow::Result<Vec<ClassifierHandle>> {
    names
        .iter()
        .filter(|n| !n.is_empty())
        .map(|n| Ok(load_model(dir, n)?.0))
        .collect()
}

pub(crate) fn default_stem(model: &str, cfg: &InversionConfig) -> String {
    format!("{model}_class{}_seed{}", cfg.target_class, cfg.seed)
}

/// Resolves `--out` to the image path.
pub(crate) fn image_path(out: &Path, stem: &str) -> anyhow::Result<PathBuf> {
    if out.extension().is_some_and(|e| e == "png") {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| PiiError::io(parent, e))?;
        }
        Ok(out.to_path_buf())
    } else {
        std::fs::create_dir_all(out).map_err(|e| PiiError::io(out, e))?;
        Ok(out.join(format!("{stem}.png")))
    }
}

/// Runs one inversion and writes the image, sidecar, config and loss trace
/// next to `png`.
pub(crate) fn invert_and_write(
    model: &ClassifierHandle,
    cfg: &InversionConfig,
    judges: &[ClassifierHandle],
    png: &Path,
    verbose: bool,
) -> anyhow::Result<(InversionResult, Sidecar)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut observer = |p: Progress| {
        if let Progress::StageStart { stage, resolution } = p {
            if verbose {
                eprintln!("stage {stage}: {resolution}px");
            }
        }
    };
    let result = invert_with(model, cfg, &mut rng, &mut observer)?;
    let mut all = vec![model.clone()];
    all.extend(judges.iter().cloned());
    let scores = judge_scores(result.image.pixels(), cfg.target_class, &all, cfg.apply_normalization)?;
    let sidecar = export_image(png, model.name(), &result, scores)?;
    let trace = png.with_extension("trace.jsonl");
    std::fs::write(&trace, result.trace_jsonl()).map_err(|e| PiiError::io(&trace, e))?;
    let cfg_path = png.with_extension("cfg");
    std::fs::write(&cfg_path, result.config.to_text()).map_err(|e| PiiError::io(&cfg_path, e))?;
    Ok((result, sidecar))
}

pub fn run(models_dir: &Path, a: InvertArgs) -> anyhow::Result<()> {
    let cfg = a.flags.resolve()?;
    let (model, _) = load_model(models_dir, &a.model)?;
    let judges = load_models(models_dir, &a.judges)?;
    let png = image_path(&a.out, &default_stem(&a.model, &cfg))?;
    let (result, sidecar) =
        invert_and_write(&model, &cfg, &judges, &png, a.verbose).with_context(|| format!("inverting `{}`", a.model))?;
    let teacher = &sidecar.judge_scores[model.name()];
    println!(
        "{} class={} predicted={} confidence={:.4} nll={:.6} steps={} elapsed={:.1}s",
        png.display(),
        cfg.target_class,
        teacher.predicted,
        teacher.target_probability,
        sidecar.losses.nll,
        result.loss_trace.len(),
        result.elapsed.as_secs_f64()
    );
    Ok(())
}
