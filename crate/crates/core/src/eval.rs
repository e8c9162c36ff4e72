//! Scoring and exporting inverted images.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{InversionConfig, InversionResult};
use crate::error::{PiiError, Result};
use crate::models::{argmax, ClassifierHandle};
use crate::tensor::Tensor;

/// Indices of the `k` largest entries, best first.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|a, b| row[*b].total_cmp(&row[*a]).then(a.cmp(b)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeAccuracy {
    pub judge: String,
    pub top1: f64,
    /// Top-k with `k = min(5, classes)`.
    pub top5: f64,
}

/// Fraction of images each judge assigns to their target class.
pub fn cross_model_accuracy(
    images: &[Tensor],
    targets: &[usize],
    judges: &[ClassifierHandle],
    normalize: bool,
) -> Result<Vec<JudgeAccuracy>> {
    if images.len() != targets.len() {
        return Err(PiiError::Shape(format!("{} images vs {} targets", images.len(), targets.len())));
    }
    if images.is_empty() {
        return Err(PiiError::Parameter("no images to evaluate".into()));
    }
    let mut out = Vec::with_capacity(judges.len());
    for judge in judges {
        let probs = judge_probabilities(images, judge, normalize)?;
        let k = 5.min(judge.num_classes());
        let (mut t1, mut t5) = (0usize, 0usize);
        for (p, y) in probs.iter().zip(targets) {
            if *y >= judge.num_classes() {
                return Err(PiiError::Parameter(format!(
                    "target {y} out of range for judge `{}`",
                    judge.name()
                )));
            }
            if argmax(p) == *y {
                t1 += 1;
            }
            if top_k(p, k).contains(y) {
                t5 += 1;
            }
        }
        let n = images.len() as f64;
        out.push(JudgeAccuracy {
            judge: judge.name().to_string(),
            top1: t1 as f64 / n,
            top5: t5 as f64 / n,
        });
    }
    Ok(out)
}

/// Class probabilities for images that may differ in resolution.
pub fn judge_probabilities(images: &[Tensor], judge: &ClassifierHandle, normalize: bool) -> Result<Vec<Vec<f64>>> {
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        img.chw()?;
        groups.entry(img.shape().to_vec()).or_default().push(i);
    }
    let mut out = vec![Vec::new(); images.len()];
    for idx in groups.values() {
        let batch = Tensor::stack(&idx.iter().map(|i| images[*i].clone()).collect::<Vec<_>>())?;
        for (i, p) in idx.iter().zip(judge.probabilities(&batch, normalize)?) {
            out[*i] = p;
        }
    }
    Ok(out)
}

/// Mean and population standard deviation across splits of
/// `exp(mean_x KL(p(y|x) || p(y)))`.
pub fn inception_score_from_probs(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if splits == 0 || probs.len() < splits {
        return Err(PiiError::Parameter(format!(
            "inception score needs at least one image per split ({} images, {splits} splits)",
            probs.len()
        )));
    }
    let k = probs[0].len();
    if probs.iter().any(|p| p.len() != k) {
        return Err(PiiError::Shape("probability rows differ in length".into()));
    }
    let n = probs.len();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let part = &probs[s * n / splits..(s + 1) * n / splits];
        let mut py = vec![0.0; k];
        for p in part {
            for (a, v) in py.iter_mut().zip(p) {
                *a += v / part.len() as f64;
            }
        }
        let kl: f64 = part
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&py)
                    .filter(|(v, _)| **v > 0.0)
                    .map(|(v, q)| v * (v / q).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / part.len() as f64;
        scores.push(kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

pub fn inception_score(images: &[Tensor], judge: &ClassifierHandle, splits: usize, normalize: bool) -> Result<(f64, f64)> {
    inception_score_from_probs(&judge_probabilities(images, judge, normalize)?, splits)
}

/// Clamps to `[0, 1]` and quantizes `[3, H, W]` to interleaved 8-bit RGB.
pub fn to_rgb8(x: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = x.chw()?;
    if c != 3 {
        return Err(PiiError::Shape(format!("PNG export needs 3 channels, got {c}")));
    }
    let d = x.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            let v = d[ch * h * w + i];
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok((h, w, out))
}

pub fn write_png(path: &Path, x: &Tensor) -> Result<()> {
    let (h, w, bytes) = to_rgb8(x)?;
    let file = File::create(path).map_err(|e| PiiError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| PiiError::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| PiiError::Format(format!("{}: {e}", path.display())))?;
    writer
        .finish()
        .map_err(|e| PiiError::Format(format!("{}: {e}", path.display())))
}

/// Reads an 8-bit RGB PNG into `[3, H, W]` with values in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| PiiError::io(path, e))?;
    let fmt_err = |e: png::DecodingError| PiiError::Ingestion(format!("{}: {e}", path.display()));
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(fmt_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| PiiError::Ingestion(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt_err)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(PiiError::Ingestion(format!(
            "{}: expected 8-bit RGB, got {:?} {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + i] = buf[i * 3 + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarLosses {
    pub nll: f64,
    pub tv: f64,
    pub l2: f64,
    pub feat: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub predicted: usize,
    /// Probability the judge assigns to the target class.
    pub target_probability: f64,
}

/// Metadata written next to every exported image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub model: String,
    pub config: InversionConfig,
    pub seed: u64,
    pub losses: SidecarLosses,
    pub judge_scores: BTreeMap<String, JudgeScore>,
}

/// Scores the final image with each judge.
pub fn judge_scores(image: &Tensor, target: usize, judges: &[ClassifierHandle], normalize: bool) -> Result<BTreeMap<String, JudgeScore>> {
    let mut out = BTreeMap::new();
    for j in judges {
        let p = &judge_probabilities(std::slice::from_ref(image), j, normalize)?[0];
        out.insert(
            j.name().to_string(),
            JudgeScore {
                predicted: argmax(p),
                target_probability: p.get(target).copied().unwrap_or(0.0),
            },
        );
    }
    Ok(out)
}

pub fn sidecar_path(png_path: &Path) -> PathBuf {
    png_path.with_extension("json")
}

/// Writes `<path>` as PNG and `<path minus extension>.json` as the sidecar.
pub fn export_image(
    path: &Path,
    model: &str,
    result: &InversionResult,
    judge_scores: BTreeMap<String, JudgeScore>,
) -> Result<Sidecar> {
    write_png(path, result.image.pixels())?;
    let last = result
        .final_record()
        .ok_or_else(|| PiiError::Parameter("inversion produced no steps".into()))?;
    let sidecar = Sidecar {
        model: model.to_string(),
        config: result.config.clone(),
        seed: result.seed,
        losses: SidecarLosses {
            nll: last.nll,
            tv: last.tv,
            l2: last.l2,
            feat: last.feat,
            total: last.total,
        },
        judge_scores,
    };
    let sp = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| PiiError::Format(e.to_string()))?;
    std::fs::write(&sp, json).map_err(|e| PiiError::io(&sp, e))?;
    Ok(sidecar)
}

/// Tiles equally sized `[3, R, R]` images row-major into a
/// `[3, rows * R, cols * R]` mosaic; missing cells stay black.
pub fn tile_grid(images: &[Tensor], rows: usize, cols: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| PiiError::Parameter("grid needs at least one image".into()))?;
    let (c, r, rw) = first.chw()?;
    if r != rw {
        return Err(PiiError::Shape("grid images must be square".into()));
    }
    if images.len() > rows * cols {
        return Err(PiiError::Parameter(format!(
            "{} images do not fit a {rows}x{cols} grid",
            images.len()
        )));
    }
    let (gh, gw) = (rows * r, cols * r);
    let mut out = vec![0.0; c * gh * gw];
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(PiiError::Shape("grid images must share one shape".into()));
        }
        let (gr, gc) = (k / cols, k % cols);
        for ch in 0..c {
            for i in 0..r {
                let src = &img.data()[(ch * r + i) * r..(ch * r + i + 1) * r];
                let row = gr * r + i;
                let dst = (ch * gh + row) * gw + gc * r;
                out[dst..dst + r].copy_from_slice(src);
            }
        }
    }
    Tensor::new(vec![c, gh, gw], out)
}

pub fn export_grid(path: &Path, images: &[Tensor], rows: usize, cols: usize) -> Result<()> {
    write_png(path, &tile_grid(images, rows, cols)?)
}

/// Summary of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub accuracy: Vec<JudgeAccuracy>,
    pub inception_score: Option<(f64, f64)>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_and_breaks_ties_by_index() {
        assert_eq!(top_k(&[0.1, 0.5, 0.5, 0.2], 3), vec![1, 2, 3]);
        assert_eq!(top_k(&[1.0, 2.0], 5), vec![1, 0]);
    }

    #[test]
    fn inception_score_extremes() {
        // identical predictions -> 1
        let same = vec![vec![0.2, 0.3, 0.5]; 6];
        let (m, s) = inception_score_from_probs(&same, 2).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && s.abs() < 1e-12);
        // confident and uniform over K classes -> K
        let k = 4;
        let onehot: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..k).map(|j| if j == i % k { 1.0 } else { 0.0 }).collect())
            .collect();
        let (m, _) = inception_score_from_probs(&onehot, 2).unwrap();
        assert!((m - k as f64).abs() < 1e-12);
        assert!(inception_score_from_probs(&onehot, 9).is_err());
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let x = Tensor::new(vec![3, 1, 2], vec![-1.0, 0.5, 0.2, 2.0, 1.0, 0.0]).unwrap();
        write_png(&p, &x).unwrap();
        let y = read_png(&p).unwrap();
        let want = [0.0, 128.0, 51.0, 255.0, 255.0, 0.0].map(|v| v / 255.0);
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_places_images_row_major() {
        let imgs: Vec<Tensor> = (0..3).map(|k| Tensor::full(&[3, 2, 2], k as f64)).collect();
        let g = tile_grid(&imgs, 2, 2).unwrap();
        assert_eq!(g.shape(), &[3, 4, 4]);
        let at = |i: usize, j: usize| g.data()[i * 4 + j];
        assert_eq!((at(0, 0), at(0, 2), at(2, 0), at(2, 2)), (0.0, 1.0, 2.0, 0.0));
        assert!(tile_grid(&imgs, 1, 2).is_err());
    }
}
