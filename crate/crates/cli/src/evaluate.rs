use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Args;
use pii_core::eval::{cross_model_accuracy, inception_score, read_png, sidecar_path, EvalReport, Sidecar};
use pii_core::models::load_model;
use pii_core::{ClassifierHandle, PiiError, Tensor};
use serde::{Deserialize, Serialize};

use crate::invert::{default_stem, invert_and_write, load_models};
use crate::ConfigFlags;

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of PNGs with JSON sidecars.
    #[arg(long, conflicts_with = "invert")]
    pub images: Option<PathBuf>,
    /// Model to invert once per class instead of loading images.
    #[arg(long, requires = "invert")]
    pub model: Option<String>,
    #[arg(long, requires = "model")]
    pub invert: bool,
    #[command(flatten)]
    pub flags: ConfigFlags,
    /// Judge models, comma separated. The first also scores the Inception score.
    #[arg(long, value_delimiter = ',', required = true)]
    pub judges: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub splits: usize,
    /// Report path. Inverted images go next to it.
    #[arg(long, default_value = "eval/report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub path: PathBuf,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateReport {
    #[serde(flatten)]
    pub report: EvalReport,
    pub mean_top1: f64,
    pub mean_top5: f64,
    pub missing_classes: Vec<usize>,
    pub files: Vec<ImageEntry>,
}

/// Scores `images` against every judge. The first judge supplies the class
/// count and the Inception score.
pub fn evaluate_images(
    images: &[Tensor],
    targets: &[usize],
    judges: &[ClassifierHandle],
    splits: usize,
    normalize: bool,
) -> anyhow::Result<(EvalReport, f64, f64, Vec<usize>)> {
    let first = judges
        .first()
        .ok_or_else(|| PiiError::Parameter("at least one judge model is required".into()))?;
    let accuracy = cross_model_accuracy(images, targets, judges, normalize)?;
    let n = accuracy.len() as f64;
    let mean_top1 = accuracy.iter().map(|a| a.top1).sum::<f64>() / n;
    let mean_top5 = accuracy.iter().map(|a| a.top5).sum::<f64>() / n;
    let present: BTreeSet<usize> = targets.iter().copied().collect();
    let missing: Vec<usize> = (0..first.num_classes()).filter(|c| !present.contains(c)).collect();
    let is = if images.len() >= splits {
        Some(inception_score(images, first, splits, normalize)?)
    } else {
        None
    };
    let report = EvalReport {
        images: images.len(),
        accuracy,
        inception_score: is,
    };
    Ok((report, mean_top1, mean_top5, missing))
}

fn load_dir(dir: &Path) -> anyhow::Result<(Vec<Tensor>, Vec<ImageEntry>, bool)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| PiiError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png") && sidecar_path(p).exists())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(PiiError::Ingestion(format!("no PNG + sidecar pairs in {}", dir.display())).into());
    }
    let mut images = Vec::new();
    let mut entries = Vec::new();
    let mut normalize = true;
    for p in paths {
        let sp = sidecar_path(&p);
        let text = std::fs::read_to_string(&sp).map_err(|e| PiiError::io(&sp, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| PiiError::Format(format!("{}: {e}", sp.display())))?;
        normalize = sidecar.config.apply_normalization;
        images.push(read_png(&p)?);
        entries.push(ImageEntry {
            path: p,
            target: sidecar.config.target_class,
        });
    }
    Ok((images, entries, normalize))
}

pub fn run(models_dir: &Path, a: EvaluateArgs) -> anyhow::Result<()> {
    if a.judges.iter().all(|j| j.is_empty()) {
        return Err(PiiError::Parameter("judge list is empty".into()).into());
    }
    let judges = load_models(models_dir, &a.judges)?;
    let out_dir = a
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    std::fs::create_dir_all(&out_dir).map_err(|e| PiiError::io(&out_dir, e))?;

    let (images, files, normalize) = match (&a.images, &a.model) {
        (Some(dir), _) => load_dir(dir)?,
        (None, Some(name)) => {
            let base = a.flags.resolve()?;
            let (model, _) = load_model(models_dir, name)?;
            let mut images = Vec::new();
            let mut files = Vec::new();
            for c in 0..model.num_classes() {
                let mut cfg = base.clone();
                cfg.target_class = c;
                let png = out_dir.join(format!("{}.png", default_stem(name, &cfg)));
                let (result, _) = invert_and_write(&model, &cfg, &judges, &png, false)?;
                images.push(result.image.into_pixels());
                files.push(ImageEntry { path: png, target: c });
            }
            (images, files, base.apply_normalization)
        }
        (None, None) => {
            return Err(PiiError::Parameter("give --images DIR or --model NAME --invert".into()).into());
        }
    };
    let targets: Vec<usize> = files.iter().map(|f| f.target).collect();
    let (report, mean_top1, mean_top5, missing) = evaluate_images(&images, &targets, &judges, a.splits, normalize)?;
    if !missing.is_empty() {
        eprintln!("warning: no image for classes {missing:?}");
    }
    let full = EvaluateReport {
        report,
        mean_top1,
        mean_top5,
        missing_classes: missing,
        files,
    };
    let json = serde_json::to_string_pretty(&full)?;
    std::fs::write(&a.out, &json).map_err(|e| PiiError::io(&a.out, e))?;
    println!("{json}");
    Ok(())
}
