//! On-disk model format: `<name>.weights` holds named little-endian f64
//! tensors and `<name>.json` is the manifest, which carries a SHA-256 of the
//! weights file.
//!
//! Weights layout: magic `PIIW`, u32 version, u32 tensor count, then per
//! tensor a u32 name length, the UTF-8 name, a u32 rank, u64 dims and the
//! values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::toy::{Arch, ToyNet, TrainConfig, Trained};
use super::{ClassifierHandle, Normalization};
use crate::error::{PiiError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PIIW";
const VERSION: u32 = 1;

/// Environment variable naming the directory of trained models.
pub const MODEL_DIR_ENV: &str = "PII_MODEL_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub arch: Arch,
    pub dataset: String,
    pub seed: u64,
    /// Top-1 accuracy on the held-out split.
    pub accuracy: f64,
    /// Hex SHA-256 of the weights file.
    pub hash: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
    pub train: TrainConfig,
}

pub fn encode_tensors(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| PiiError::Format("weights file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(PiiError::Format("not a weights file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(PiiError::Format(format!("unsupported weights version {version}")));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| PiiError::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| PiiError::Format("tensor size overflows".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| PiiError::Format("tensor size overflows".into()))?)?;
        let data = raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(PiiError::Format(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(PiiError::Format("trailing bytes after the last tensor".into()));
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.weights")), dir.join(format!("{name}.json")))
}

/// Writes a trained model and its manifest; returns the manifest.
pub fn save_model(
    dir: &Path,
    name: &str,
    trained: &Trained,
    dataset: &str,
    class_names: &[String],
    train: &TrainConfig,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| PiiError::io(dir, e))?;
    let bytes = encode_tensors(&trained.net.to_tensors());
    let manifest = Manifest {
        name: name.to_string(),
        arch: trained.net.arch(),
        dataset: dataset.to_string(),
        seed: train.seed,
        accuracy: trained.report.test_accuracy,
        hash: sha256_hex(&bytes),
        num_classes: class_names.len(),
        class_names: class_names.to_vec(),
        normalization: trained.normalization.clone(),
        train: train.clone(),
    };
    let (wp, mp) = paths(dir, name);
    std::fs::write(&wp, &bytes).map_err(|e| PiiError::io(&wp, e))?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| PiiError::Format(e.to_string()))?;
    std::fs::write(&mp, json).map_err(|e| PiiError::io(&mp, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path, name: &str) -> Result<Manifest> {
    let (_, mp) = paths(dir, name);
    if !mp.is_file() {
        return Err(PiiError::Ingestion(format!(
            "model `{name}` not found: {} does not exist (train it with `pii train`)",
            mp.display()
        )));
    }
    let text = std::fs::read_to_string(&mp).map_err(|e| PiiError::io(&mp, e))?;
    serde_json::from_str(&text).map_err(|e| PiiError::Format(format!("{}: {e}", mp.display())))
}

/// Loads a model, verifying the weights hash against the manifest.
pub fn load_model(dir: &Path, name: &str) -> Result<(ClassifierHandle, Manifest)> {
    let manifest = read_manifest(dir, name)?;
    let (wp, _) = paths(dir, name);
    let bytes = std::fs::read(&wp).map_err(|e| PiiError::io(&wp, e))?;
    let hash = sha256_hex(&bytes);
    if hash != manifest.hash {
        return Err(PiiError::Format(format!(
            "{}: hash {hash} does not match manifest {}",
            wp.display(),
            manifest.hash
        )));
    }
    let net = ToyNet::from_tensors(manifest.arch, manifest.num_classes, decode_tensors(&bytes)?)?;
    let handle = net.into_handle(manifest.name.clone(), Some(manifest.normalization.clone()));
    Ok((handle, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::toy::TrainReport;

    #[test]
    fn save_load_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let trained = Trained {
            net: ToyNet::init(Arch::CnnBn, 3, 1).unwrap(),
            normalization: Normalization::new(vec![0.5; 3], vec![0.2; 3]).unwrap(),
            report: TrainReport {
                train_accuracy: 0.9,
                test_accuracy: 0.8,
                final_loss: 0.1,
            },
        };
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let m = save_model(dir.path(), "m", &trained, "shapes10", &names, &TrainConfig::default()).unwrap();
        let (h, m2) = load_model(dir.path(), "m").unwrap();
        assert_eq!(m, m2);
        assert_eq!(h.num_classes(), 3);
        let x = Tensor::full(&[1, 3, 8, 8], 0.3);
        let want = trained.handle("m").logits(&x, true).unwrap();
        assert_eq!(h.logits(&x, true).unwrap(), want);

        let wp = dir.path().join("m.weights");
        let mut bytes = std::fs::read(&wp).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&wp, bytes).unwrap();
        assert!(matches!(load_model(dir.path(), "m"), Err(PiiError::Format(_))));
        assert!(matches!(load_model(dir.path(), "nope"), Err(PiiError::Ingestion(_))));
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(decode_tensors(b"nope").is_err());
        let mut t = BTreeMap::new();
        t.insert("x".to_string(), Tensor::zeros(&[2, 2]));
        let mut b = encode_tensors(&t);
        assert_eq!(decode_tensors(&b).unwrap(), t);
        b.push(0);
        assert!(decode_tensors(&b).is_err());
        b.truncate(b.len() - 5);
        assert!(decode_tensors(&b).is_err());
    }
}
