//! One inversion per value along an ablation axis.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Args;
use pii_core::eval::export_grid;
use pii_core::models::load_model;
use pii_core::{ClassifierHandle, InversionConfig, PiiError, ScheduleMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::invert::{invert_and_write, load_models};
use crate::ConfigFlags;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TvWeight,
    EnsembleSize,
    Alpha,
    Beta,
    /// Values are `alpha:beta` pairs.
    AlphaBetaGrid,
    /// `color_shift`, `none`, or one baseline augmentation replacing ColorShift.
    AugmentationKind,
    ScheduleMode,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 7] = [
        SweepAxis::TvWeight,
        SweepAxis::EnsembleSize,
        SweepAxis::Alpha,
        SweepAxis::Beta,
        SweepAxis::AlphaBetaGrid,
        SweepAxis::AugmentationKind,
        SweepAxis::ScheduleMode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::TvWeight => "tv_weight",
            SweepAxis::EnsembleSize => "ensemble_size",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::AlphaBetaGrid => "alpha_beta_grid",
            SweepAxis::AugmentationKind => "augmentation_kind",
            SweepAxis::ScheduleMode => "schedule_mode",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::TvWeight => &["1e-9", "1e-8", "1e-7", "1e-6", "1e-5", "1e-4"],
            SweepAxis::EnsembleSize => &["1", "2", "4", "8", "16", "32"],
            SweepAxis::Alpha | SweepAxis::Beta => &["0", "0.25", "0.5", "1", "2"],
            SweepAxis::AlphaBetaGrid => &[
                "0:0", "0:0.5", "0:1", "0.5:0", "0.5:0.5", "0.5:1", "1:0", "1:0.5", "1:1",
            ],
            SweepAxis::AugmentationKind => {
                &["color_shift", "none", "flip", "crop", "grayscale", "color_jitter"]
            }
            SweepAxis::ScheduleMode => &["zoom_only", "zoom_and_center", "center_only", "none"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Config for one cell. The seed is left as in `base`.
    pub fn apply(self, base: &InversionConfig, value: &str) -> pii_core::Result<InversionConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::TvWeight => cfg.set("tv_weight", value)?,
            SweepAxis::EnsembleSize => cfg.set("ensemble_size", value)?,
            SweepAxis::Alpha => cfg.set("alpha", value)?,
            SweepAxis::Beta => cfg.set("beta", value)?,
            SweepAxis::AlphaBetaGrid => {
                let (a, b) = value.split_once(':').ok_or_else(|| {
                    PiiError::Parameter(format!("alpha_beta_grid value {value:?} is not `alpha:beta`"))
                })?;
                cfg.set("alpha", a.trim())?;
                cfg.set("beta", b.trim())?;
            }
            SweepAxis::AugmentationKind => {
                if value != "color_shift" {
                    cfg.augmentation.alpha = 0.0;
                    cfg.augmentation.beta = 0.0;
                    cfg.set("baseline_augs", value)?;
                }
            }
            SweepAxis::ScheduleMode => {
                let mode: ScheduleMode = value.parse()?;
                if mode == ScheduleMode::None && base.schedule_mode != ScheduleMode::None {
                    // same total step budget as the staged runs
                    cfg.iterations_per_stage = base.iterations_per_stage * base.n_stages;
                }
                cfg.schedule_mode = mode;
            }
        }
        pii_core::config::validate_config(cfg)
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = PiiError;

    fn from_str(s: &str) -> Result<Self, PiiError> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = SweepAxis::ALL.iter().map(|a| a.as_str()).collect();
                PiiError::Parameter(format!("unknown sweep axis {s:?} (valid axes: {})", valid.join(", ")))
            })
    }
}

/// Seed of cell `index`: the first eight bytes of sha256 over both values.
pub fn cell_seed(base: u64, index: usize) -> u64 {
    let digest = Sha256::new()
        .chain_update(base.to_le_bytes())
        .chain_update((index as u64).to_le_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: String,
    /// tv_weight, ensemble_size, alpha, beta, alpha_beta_grid,
    /// augmentation_kind or schedule_mode.
    #[arg(long)]
    pub axis: String,
    /// Comma list of values; each axis has a default list.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    #[command(flatten)]
    pub flags: ConfigFlags,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub judges: Vec<String>,
    /// Cells run concurrently on this many threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub value: String,
    pub seed: u64,
    pub nll: f64,
    /// Teacher probability of the target class.
    pub confidence: f64,
    pub tv: f64,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub model: String,
    pub axis: SweepAxis,
    pub base_seed: u64,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("index\tvalue\tseed\tnll\tconfidence\ttv\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                c.index, c.value, c.seed, c.nll, c.confidence, c.tv
            ));
        }
        s
    }
}

type CellOutcome = anyhow::Result<(SweepCell, pii_core::Tensor)>;

fn grid_shape(axis: SweepAxis, values: &[String]) -> (usize, usize) {
    if axis == SweepAxis::AlphaBetaGrid {
        let mut alphas: Vec<&str> = values.iter().filter_map(|v| v.split_once(':')).map(|(a, _)| a).collect();
        alphas.dedup();
        let rows = alphas.len().max(1);
        (rows, values.len().div_ceil(rows))
    } else {
        (1, values.len())
    }
}

/// Runs every cell and writes per-cell artifacts, `grid.png`, `sweep.tsv`
/// and `sweep.json` into `out`.
pub fn run_sweep(
    model: &ClassifierHandle,
    base: &InversionConfig,
    axis: SweepAxis,
    values: &[String],
    judges: &[ClassifierHandle],
    out: &Path,
    jobs: usize,
) -> anyhow::Result<SweepReport> {
    if values.is_empty() {
        return Err(PiiError::Parameter("sweep needs at least one value".into()).into());
    }
    let cfgs = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut c = axis.apply(base, v)?;
            c.seed = cell_seed(base.seed, i);
            Ok(c)
        })
        .collect::<pii_core::Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(|e| PiiError::io(out, e))?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CellOutcome>>> = Mutex::new((0..cfgs.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= cfgs.len() {
            break;
        }
        let name = format!("cell{i:02}.png");
        let png = out.join(&name);
        let r = invert_and_write(model, &cfgs[i], judges, &png, false).map(|(result, sidecar)| {
            let teacher = &sidecar.judge_scores[model.name()];
            let cell = SweepCell {
                index: i,
                value: values[i].clone(),
                seed: cfgs[i].seed,
                nll: sidecar.losses.nll,
                confidence: teacher.target_probability,
                tv: sidecar.losses.tv,
                image: name,
            };
            (cell, result.image.into_pixels())
        });
        slots.lock().expect("worker panicked")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(worker);
        }
    });

    let mut cells = Vec::new();
    let mut images = Vec::new();
    for slot in slots.into_inner().expect("worker panicked") {
        let (cell, img) = slot.expect("every cell ran")?;
        cells.push(cell);
        images.push(img);
    }
    let (rows, cols) = grid_shape(axis, values);
    if images.windows(2).all(|w| w[0].shape() == w[1].shape()) {
        export_grid(&out.join("grid.png"), &images, rows, cols)?;
    }
    let report = SweepReport {
        model: model.name().to_string(),
        axis,
        base_seed: base.seed,
        cells,
    };
    let tsv = out.join("sweep.tsv");
    std::fs::write(&tsv, report.to_tsv()).map_err(|e| PiiError::io(&tsv, e))?;
    let js = out.join("sweep.json");
    std::fs::write(&js, serde_json::to_string_pretty(&report)?).map_err(|e| PiiError::io(&js, e))?;
    Ok(report)
}

pub fn run(models_dir: &Path, a: SweepArgs) -> anyhow::Result<()> {
    let axis: SweepAxis = a.axis.parse()?;
    let base = a.flags.resolve()?;
    let values = if a.values.is_empty() {
        axis.default_values()
    } else {
        a.values
    };
    let (model, _) = load_model(models_dir, &a.model)?;
    let judges = load_models(models_dir, &a.judges)?;
    let report = run_sweep(&model, &base, axis, &values, &judges, &a.out, a.jobs)?;
    print!("{}", report.to_tsv());
    Ok(())
}
