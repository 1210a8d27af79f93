//! Synthetic head phantoms: nested ellipsoid shells, a class-dependent
//! ventricle deformation, an age-coupled intensity gradient and optional
//! layered tumour blobs with BraTS-style labels.

use std::path::Path;

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::train::sample_seed;
use crate::volume::{save_labels, save_volume, LabelVolume, Volume, VolumeFormat, BRATS_LABELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: [usize; 3],
    pub channels: usize,
    /// Inclusive range of anatomy shells inside the head.
    pub shells: [usize; 2],
    /// Outer head semi-axes as fractions of the grid.
    pub head_radius: [f64; 2],
    /// Inclusive blob count range; `[0, 0]` disables tumours.
    pub blobs: [usize; 2],
    /// Blob radius range in voxels.
    pub blob_radius: [f64; 2],
    /// Edema intensity range.
    pub blob_intensity: [f64; 2],
    pub age_range: [f64; 2],
    /// Strength of the age-dependent intensity gradient along H.
    pub age_coupling: f64,
    /// Relative ventricle enlargement per class; its length is the class count.
    pub class_deformation: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: [48, 48, 48],
            channels: 1,
            shells: [2, 3],
            head_radius: [0.38, 0.44],
            blobs: [0, 0],
            blob_radius: [5.0, 8.0],
            blob_intensity: [1.3, 1.6],
            age_range: [55.0, 90.0],
            age_coupling: 0.4,
            class_deformation: vec![0.0, 0.15, 0.3],
            noise: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        if self.grid.iter().any(|&g| g < 8) {
            return bad("grid extents must be >= 8");
        }
        if self.channels == 0 || self.channels > 4 {
            return bad("channels must be in 1..=4");
        }
        if self.shells[0] > self.shells[1] || self.blobs[0] > self.blobs[1] {
            return bad("count ranges must satisfy min <= max");
        }
        for (name, r) in [
            ("head_radius", self.head_radius),
            ("blob_radius", self.blob_radius),
            ("blob_intensity", self.blob_intensity),
            ("age_range", self.age_range),
        ] {
            if !(r[0] < r[1]) || r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("phantom: {name} must be a non-degenerate range")));
            }
        }
        if self.head_radius[0] <= 0.0 || self.head_radius[1] > 0.5 || self.blob_radius[0] <= 0.0 {
            return bad("radii out of range");
        }
        if self.class_deformation.is_empty() || self.class_deformation.iter().any(|m| !(0.0..1.0).contains(m)) {
            return bad("class deformations must lie in [0, 1)");
        }
        if !(self.noise >= 0.0) || !(self.age_coupling >= 0.0) {
            return bad("noise and age coupling must be >= 0");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_deformation.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: LabelVolume,
    pub class: usize,
    pub age: f64,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalised radius; < 1 inside.
    fn rho2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|k| ((p[k] - self.center[k]) / self.radii[k]).powi(2)).sum()
    }
}

/// Per-channel contrast of (tissue, ventricle, edema, enhancing, necrosis).
const CONTRAST: [[f64; 5]; 4] = [
    [1.0, 0.2, 1.0, 1.4, 0.3],
    [1.0, 1.6, 1.3, 1.0, 1.5],
    [0.8, 0.3, 0.9, 1.6, 0.4],
    [1.1, 1.2, 1.5, 0.9, 1.2],
];

/// Phantom `index` of the stream defined by `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec, index: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, 0, index));
    let [w, d, h] = spec.grid;
    let dims = [w as f64, d as f64, h as f64];
    let class = rng.random_range(0..spec.num_classes());
    let age = (rng.random_range(spec.age_range[0]..spec.age_range[1]) * 100.0).round() / 100.0;
    let age_t = (age - spec.age_range[0]) / (spec.age_range[1] - spec.age_range[0]);

    let center: [f64; 3] = std::array::from_fn(|k| dims[k] / 2.0 + rng.random_range(-1.0..1.0) * dims[k] / 48.0);
    let head = Ellipsoid {
        center,
        radii: std::array::from_fn(|k| dims[k] * rng.random_range(spec.head_radius[0]..spec.head_radius[1])),
    };
    let n_shells = rng.random_range(spec.shells[0]..=spec.shells[1]);
    let shells: Vec<(f64, f64)> = (0..n_shells)
        .map(|_| (rng.random_range(0.45..0.95), rng.random_range(0.5..0.9)))
        .collect();
    // Ventricles grow with class and, more weakly, with age.
    let m = spec.class_deformation[class];
    let vent = Ellipsoid {
        center,
        radii: std::array::from_fn(|k| {
            let base = head.radii[k] * [0.22, 0.3, 0.22][k];
            base * (1.0 + 1.5 * m + 0.1 * age_t) * rng.random_range(0.95..1.05)
        }),
    };

    let n_blobs = rng.random_range(spec.blobs[0]..=spec.blobs[1]);
    let blobs: Vec<(Ellipsoid, f64)> = (0..n_blobs)
        .map(|_| {
            let r = rng.random_range(spec.blob_radius[0]..spec.blob_radius[1]);
            let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            let dist = rng.random_range(0.35..0.6);
            let c: [f64; 3] = std::array::from_fn(|k| center[k] + dir[k] / norm * dist * head.radii[k]);
            let e = Ellipsoid {
                center: c,
                radii: [r; 3],
            };
            (e, rng.random_range(spec.blob_intensity[0]..spec.blob_intensity[1]))
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut data = Array4::<f32>::zeros((spec.channels, w, d, h));
    let mut labels = Array3::<u8>::zeros((w, d, h));
    for i in 0..w {
        for j in 0..d {
            for k in 0..h {
                let p = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                let rho = head.rho2(p).sqrt();
                // Tissue class: 0 outside, 1 tissue, 2 ventricle.
                let mut tissue = if rho < 1.0 { 1usize } else { 0 };
                let mut base = 0.0;
                if tissue == 1 {
                    base = 0.6;
                    for &(frac, val) in &shells {
                        if rho < frac {
                            base = val;
                        }
                    }
                    if vent.rho2(p) < 1.0 {
                        tissue = 2;
                    }
                }
                let mut label = 0u8;
                let mut blob_val = 0.0;
                for (e, val) in &blobs {
                    let r = e.rho2(p).sqrt();
                    let l = if r < 0.35 {
                        1
                    } else if r < 0.6 {
                        4
                    } else if r < 1.0 {
                        2
                    } else {
                        0
                    };
                    if l != 0 && (label == 0 || rank(l) > rank(label)) {
                        label = l;
                        blob_val = *val;
                    }
                }
                if tissue == 0 {
                    label = 0;
                }
                labels[[i, j, k]] = label;
                let gradient = 1.0 + spec.age_coupling * (age_t - 0.5) * (p[2] / dims[2] - 0.5) * 2.0;
                for c in 0..spec.channels {
                    let con = CONTRAST[c];
                    let v = match (tissue, label) {
                        (0, _) => 0.0,
                        (_, 2) => blob_val * con[2] * 0.6,
                        (_, 4) => blob_val * con[3] * 0.6,
                        (_, 1) => con[4] * 0.3,
                        (2, _) => con[1] * 0.3,
                        _ => base * con[0] * gradient,
                    };
                    data[[c, i, j, k]] = (v + noise.sample(&mut rng) * (spec.noise > 0.0) as u8 as f64) as f32;
                }
            }
        }
    }
    Ok(Phantom {
        volume: Volume::new(data)?,
        labels: LabelVolume::new(labels, BRATS_LABELS.to_vec())?,
        class,
        age,
    })
}

/// Nesting priority so cores win over rims where blobs overlap.
fn rank(label: u8) -> u8 {
    match label {
        1 => 3,
        4 => 2,
        2 => 1,
        _ => 0,
    }
}

/// Writes `count` phantoms as raw volumes plus label maps and a manifest.
/// Subjects are `subj-<index>`; each phantom is its own subject.
pub fn write_phantom_dataset(spec: &PhantomSpec, count: usize, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("phantom count must be positive".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let phantoms = crate::train::per_sample(&(0..count).collect::<Vec<_>>(), |_, i| {
        generate_phantom(spec, i as u64)
    })?;
    let mut records = Vec::with_capacity(count);
    for (i, ph) in phantoms.iter().enumerate() {
        let id = format!("phantom-{i:04}");
        let vol = format!("{id}.raw");
        let lab = format!("{id}_labels.raw");
        save_volume(&dir.join(&vol), &ph.volume, VolumeFormat::Raw)?;
        save_labels(&dir.join(&lab), &ph.labels)?;
        records.push(SampleRecord {
            id,
            subject: format!("subj-{i:04}"),
            volume: vol,
            labels: Some(lab),
            class: Some(ph.class),
            target: Some(ph.age),
            split: None,
        });
    }
    let manifest = Manifest {
        label_set: BRATS_LABELS.to_vec(),
        num_classes: Some(spec.num_classes()),
        records,
    };
    manifest.save(dir)?;
    Ok(manifest)
}
