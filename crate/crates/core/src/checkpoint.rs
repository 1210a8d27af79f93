//! `.medckpt` checkpoint container.
//!
//! Layout: 8-byte magic `MEDCKPT\0`, little-endian `u32` format version,
//! `u64` manifest length, UTF-8 JSON manifest, then every tensor's values as
//! little-endian `f64` in manifest order.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"MEDCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    EncoderSsl,
    TransformerSsl,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub stage: Stage,
    /// Hash of the architecture-defining configuration.
    pub backbone_fingerprint: String,
    /// Hash of the full resolved run configuration.
    pub run_fingerprint: String,
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    stage: Stage,
    backbone_fingerprint: String,
    run_fingerprint: String,
    epoch: usize,
    best_metric: Option<f64>,
    config: serde_json::Value,
    tensors: Vec<Entry>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), reason.into()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            stage: self.stage,
            backbone_fingerprint: self.backbone_fingerprint.clone(),
            run_fingerprint: self.run_fingerprint.clone(),
            epoch: self.epoch,
            best_metric: self.best_metric.filter(|m| m.is_finite()),
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).expect("vec write");
        out.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for &v in t.iter() {
                out.write_f64::<LittleEndian>(v).expect("vec write");
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| corrupt(path, "truncated header"))?;
        if &magic != MAGIC {
            return Err(corrupt(path, "not a checkpoint (bad magic)"));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| corrupt(path, "truncated header"))?;
        if version != VERSION {
            return Err(corrupt(path, format!("unsupported version {version}")));
        }
        let len = cur.read_u64::<LittleEndian>().map_err(|_| corrupt(path, "truncated header"))? as usize;
        let start = cur.position() as usize;
        let json = bytes
            .get(start..start + len)
            .ok_or_else(|| corrupt(path, "truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        cur.set_position((start + len) as u64);
        let mut params = ParamStore::new();
        for e in &manifest.tensors {
            if e.dtype != "f64" {
                return Err(Error::UnsupportedDtype(e.dtype.clone()));
            }
            let n: usize = e.shape.iter().product();
            let mut data = vec![0.0; n];
            cur.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|_| corrupt(path, format!("payload truncated at {}", e.name)))?;
            let t = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|err| Error::Shape(err.to_string()))?;
            params.insert(e.name.clone(), t);
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(corrupt(path, "trailing bytes after payload"));
        }
        Ok(Self {
            params,
            stage: manifest.stage,
            backbone_fingerprint: manifest.backbone_fingerprint,
            run_fingerprint: manifest.run_fingerprint,
            epoch: manifest.epoch,
            best_metric: manifest.best_metric,
            config: manifest.config,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = PathBuf::from(path);
        tmp.set_extension("medckpt.tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Errors unless the backbone fingerprint matches or `force` is set.
    pub fn check_backbone(&self, expected: &str, force: bool) -> Result<()> {
        if self.backbone_fingerprint == expected {
            return Ok(());
        }
        if force {
            log::warn!(
                "backbone fingerprint mismatch ignored: checkpoint {} vs config {}",
                self.backbone_fingerprint,
                expected
            );
            return Ok(());
        }
        Err(Error::FingerprintMismatch {
            expected: expected.to_string(),
            found: self.backbone_fingerprint.clone(),
        })
    }

    pub fn require_stage(&self, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint stage {:?} is not one of {:?}",
                self.stage, allowed
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamStore::new();
        params.insert("a.weight", ArrayD::from_shape_fn(IxDyn(&[2, 3]), |_| rng.random()));
        params.insert("b", ArrayD::from_elem(IxDyn(&[]), -1.5));
        params.insert("c", ArrayD::zeros(IxDyn(&[0])));
        Checkpoint {
            params,
            stage: Stage::TransformerSsl,
            backbone_fingerprint: "abc".into(),
            run_fingerprint: "def".into(),
            epoch: 7,
            best_metric: Some(0.25),
            config: serde_json::json!({"seed": 3}),
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.medckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(!dir.path().join("x.medckpt.tmp").exists());
    }

    #[test]
    fn corrupt_files_rejected() {
        let p = Path::new("mem");
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
    }

    #[test]
    fn fingerprint_check() {
        let ck = sample();
        assert!(ck.check_backbone("abc", false).is_ok());
        assert!(matches!(ck.check_backbone("zzz", false), Err(Error::FingerprintMismatch { .. })));
        assert!(ck.check_backbone("zzz", true).is_ok());
        assert!(ck.require_stage(&[Stage::EncoderSsl]).is_err());
    }
}
