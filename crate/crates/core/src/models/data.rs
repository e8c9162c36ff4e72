//! Labelled image sets for training the bundled classifiers.
//!
//! `shapes10` is generated procedurally and needs no files. CIFAR-10 is read
//! from the binary distribution under the data directory.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PiiError, Result};
use crate::tensor::Tensor;

/// Environment variable naming the directory that holds external datasets.
pub const DATA_DIR_ENV: &str = "PII_DATA_DIR";

pub const SHAPES10_CLASSES: [&str; 10] = [
    "disk",
    "square",
    "triangle",
    "plus",
    "ring",
    "horizontal_stripes",
    "vertical_stripes",
    "checkerboard",
    "diagonal_stripes",
    "cross",
];

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images `[3, R, R]` with values in `[0, 1]` and integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn resolution(&self) -> usize {
        self.images.first().map_or(0, |t| t.shape()[2])
    }

    /// Stacks the images at `idx` into a batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let imgs: Vec<Tensor> = idx.iter().map(|i| self.images[*i].clone()).collect();
        Ok((Tensor::stack(&imgs)?, idx.iter().map(|i| self.labels[*i]).collect()))
    }

    /// Per-channel mean and standard deviation over the whole set.
    pub fn channel_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.images.first().map_or(0, |t| t.shape()[0]);
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for img in &self.images {
            let plane = img.len() / c;
            for ch in 0..c {
                for v in &img.data()[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += plane;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count as f64 - m * m).max(1e-12).sqrt())
            .collect();
        (mean, std)
    }
}

/// Procedural 32x32 RGB shapes and textures in ten classes. Colors, position,
/// size and pixel noise are random, so labels depend only on geometry.
pub fn shapes10(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        images.push(render_shape(label, 32, &mut rng));
        labels.push(label);
    }
    Dataset {
        name: "shapes10".into(),
        images,
        labels,
        class_names: SHAPES10_CLASSES.iter().map(|s| s.to_string()).collect(),
    }
}

fn luma(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn render_shape<R: Rng>(label: usize, res: usize, rng: &mut R) -> Tensor {
    let bg: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let fg = loop {
        let c: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        if (luma(&c) - luma(&bg)).abs() > 0.25 {
            break c;
        }
    };
    let r = res as f64;
    let cy = rng.random_range(0.3 * r..0.7 * r);
    let cx = rng.random_range(0.3 * r..0.7 * r);
    let s = rng.random_range(0.18 * r..0.32 * r);
    let period = rng.random_range(4.0..8.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let inside = |y: f64, x: f64| -> bool {
        let (dy, dx) = (y - cy, x - cx);
        let dist = (dy * dy + dx * dx).sqrt();
        let wave = |t: f64| (2.0 * PI * t / period + phase).sin() > 0.0;
        match label {
            0 => dist < s,
            1 => dy.abs().max(dx.abs()) < 0.85 * s,
            2 => dy > -s && dy < s && dx.abs() < (dy + s) * 0.5,
            3 => (dy.abs() < s && dx.abs() < s / 3.0) || (dx.abs() < s && dy.abs() < s / 3.0),
            4 => (dist - 0.75 * s).abs() < 0.22 * s,
            5 => wave(y),
            6 => wave(x),
            7 => wave(y) ^ wave(x),
            8 => wave((x + y) / 2f64.sqrt()),
            _ => dy.abs() < s && dx.abs() < s && ((dy - dx).abs() < s / 3.0 || (dy + dx).abs() < s / 3.0),
        }
    };
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut data = vec![0.0; 3 * res * res];
    for i in 0..res {
        for j in 0..res {
            // 2x2 supersampling for soft edges
            let mut m = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if inside(i as f64 + oy, j as f64 + ox) {
                    m += 0.25;
                }
            }
            for ch in 0..3 {
                let v = bg[ch] * (1.0 - m) + fg[ch] * m + noise.sample(rng);
                data[(ch * res + i) * res + j] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![3, res, res], data)
}

/// Reads the data directory from the environment.
pub fn data_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Loads CIFAR-10 from `<dir>/cifar-10-batches-bin`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let root = dir.join("cifar-10-batches-bin");
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![root.join("test_batch.bin")],
    };
    if let Some(missing) = files.iter().find(|f| !f.is_file()) {
        return Err(PiiError::Ingestion(format!(
            "CIFAR-10 file {} not found; download https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz \
             and extract it into ${DATA_DIR_ENV}",
            missing.display()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let bytes = std::fs::read(f).map_err(|e| PiiError::io(f, e))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(PiiError::Ingestion(format!(
                "{} is not a whole number of CIFAR-10 records",
                f.display()
            )));
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(PiiError::Ingestion(format!("label {label} out of range in {}", f.display())));
            }
            labels.push(label);
            let data = rec[1..].iter().map(|b| *b as f64 / 255.0).collect();
            images.push(Tensor::from_parts(vec![3, 32, 32], data));
        }
    }
    Ok(Dataset {
        name: "cifar10".into(),
        images,
        labels,
        class_names: CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Resolves a dataset by name. `shapes10` is generated with `n` samples for
/// the requested split; `cifar10` is read from `data_dir`.
pub fn load_dataset(name: &str, split: Split, n: usize, seed: u64, data_dir: Option<&Path>) -> Result<Dataset> {
    match name {
        "shapes10" => {
            // disjoint streams for the two splits
            let s = match split {
                Split::Train => seed.wrapping_mul(2),
                Split::Test => seed.wrapping_mul(2).wrapping_add(1),
            };
            Ok(shapes10(n, s))
        }
        "cifar10" => {
            let dir = data_dir.ok_or_else(|| {
                PiiError::Ingestion(format!("dataset `cifar10` needs ${DATA_DIR_ENV} to point at its directory"))
            })?;
            let mut d = load_cifar10(dir, split)?;
            if n < d.len() {
                d.images.truncate(n);
                d.labels.truncate(n);
            }
            Ok(d)
        }
        other => Err(PiiError::Ingestion(format!(
            "unknown dataset `{other}` (available: shapes10, cifar10)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_balanced_and_bounded() {
        let d = shapes10(200, 1);
        assert_eq!(d.len(), 200);
        for c in 0..10 {
            assert_eq!(d.labels.iter().filter(|l| **l == c).count(), 20);
        }
        for img in &d.images {
            assert_eq!(img.shape(), &[3, 32, 32]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(shapes10(5, 3).images, shapes10(5, 3).images);
    }

    #[test]
    fn missing_cifar_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = load_cifar10(dir.path(), Split::Test).unwrap_err();
        assert!(matches!(e, PiiError::Ingestion(ref m) if m.contains("cifar-10-binary")));
        assert!(load_dataset("imagenet", Split::Train, 1, 0, None).is_err());
    }

    #[test]
    fn cifar_records_decode() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("cifar-10-batches-bin");
        std::fs::create_dir_all(&root).unwrap();
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(255u8, 3072));
        std::fs::write(root.join("test_batch.bin"), [rec.clone(), rec].concat()).unwrap();
        let d = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(d.labels, vec![7, 7]);
        assert!(d.images[0].data().iter().all(|v| *v == 1.0));
    }
}
