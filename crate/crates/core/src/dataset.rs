//! On-disk dataset layout: a `manifest.json` listing sample records next to
//! raw or NIfTI volume files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    average_pool_resize, load_labels, load_volume, normalize_intensity, pool_labels, LabelVolume, Volume,
    VolumeFormat, BRATS_LABELS,
};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub subject: String,
    /// Path relative to the dataset directory.
    pub volume: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "default_label_set")]
    pub label_set: Vec<u8>,
    #[serde(default)]
    pub num_classes: Option<usize>,
    pub records: Vec<SampleRecord>,
}

fn default_label_set() -> Vec<u8> {
    BRATS_LABELS.to_vec()
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.records.is_empty() {
            return Err(Error::Empty(format!("{} lists no samples", path.display())));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// A loaded, preprocessed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub subject: String,
    pub volume: Volume,
    pub labels: Option<LabelVolume>,
    pub class: Option<usize>,
    pub target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// Average-pooling factor applied after loading (1 keeps the grid).
    pub pool_factor: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            pool_factor: 1,
        }
    }
}

/// Loads every record: per-channel min-max normalisation, then optional
/// average pooling (labels take the centre voxel of each window).
pub fn load_dataset(dir: &Path, pool_factor: usize) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = Manifest::load(dir)?;
    let mut samples = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let vpath = dir.join(&r.volume);
        let mut volume = normalize_intensity(&load_volume(&vpath, VolumeFormat::from_path(&vpath)?)?)?;
        let mut labels = match &r.labels {
            Some(l) => Some(load_labels(&dir.join(l), &manifest.label_set)?),
            None => None,
        };
        if let Some(l) = &labels {
            if l.spatial() != volume.spatial() {
                return Err(Error::Shape(format!(
                    "{}: labels {:?} do not match volume {:?}",
                    r.id,
                    l.spatial(),
                    volume.spatial()
                )));
            }
        }
        if pool_factor > 1 {
            volume = average_pool_resize(&volume, pool_factor)?;
            labels = labels.map(|l| pool_labels(&l, pool_factor)).transpose()?;
        }
        samples.push(Sample {
            id: r.id.clone(),
            subject: r.subject.clone(),
            volume,
            labels,
            class: r.class,
            target: r.target,
        });
    }
    Ok((manifest, samples))
}

/// Samples whose subject is in `subjects`, in dataset order.
pub fn select_subjects<'a>(samples: &'a [Sample], subjects: &[String]) -> Vec<&'a Sample> {
    let set: std::collections::BTreeSet<&String> = subjects.iter().collect();
    samples.iter().filter(|s| set.contains(&s.subject)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{save_labels, save_volume};
    use ndarray::{Array3, Array4};

    #[test]
    fn load_normalises_and_pools() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array4::from_shape_fn((1, 4, 4, 4), |(_, i, j, k)| (i + j + k) as f32 * 2.0 + 3.0);
        save_volume(&dir.path().join("a.raw"), &Volume::new(data).unwrap(), VolumeFormat::Raw).unwrap();
        let labels = LabelVolume::new(Array3::from_elem((4, 4, 4), 2u8), BRATS_LABELS.to_vec()).unwrap();
        save_labels(&dir.path().join("a_seg.raw"), &labels).unwrap();
        Manifest {
            label_set: BRATS_LABELS.to_vec(),
            num_classes: None,
            records: vec![SampleRecord {
                id: "a".into(),
                subject: "s0".into(),
                volume: "a.raw".into(),
                labels: Some("a_seg.raw".into()),
                class: Some(1),
                target: Some(40.0),
                split: None,
            }],
        }
        .save(dir.path())
        .unwrap();
        let (_, s) = load_dataset(dir.path(), 1).unwrap();
        let v = &s[0].volume.data;
        assert_eq!(v.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
        assert_eq!(v.iter().cloned().fold(f32::NEG_INFINITY, f32::max), 1.0);
        let (_, s) = load_dataset(dir.path(), 2).unwrap();
        assert_eq!(s[0].volume.spatial(), [2, 2, 2]);
        assert_eq!(s[0].labels.as_ref().unwrap().spatial(), [2, 2, 2]);
        assert_eq!(s[0].class, Some(1));
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), 1), Err(Error::Io { .. })));
    }
}
