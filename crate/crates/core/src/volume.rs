//! Volume data model, file I/O and preprocessing.
//!
//! Arrays are laid out `(C, W, D, H)` in row-major order, so `H` varies
//! fastest. The raw format is a headerless little-endian payload next to a
//! JSON sidecar; NIfTI-1 single-file images are also supported.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt};
use ndarray::{s, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-channel 3D intensity array `(C, W, D, H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array4<f32>,
}

/// BraTS-style default label set: background, necrotic core, edema, enhancing.
pub const BRATS_LABELS: [u8; 4] = [0, 1, 2, 4];

/// Integer label map `(W, D, H)` with a declared label set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub labels: Array3<u8>,
    pub label_set: Vec<u8>,
}

impl Volume {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume contains NaN or Inf".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            data: Array4::zeros(shape),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Spatial extent `(W, D, H)`.
    pub fn spatial(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

impl LabelVolume {
    pub fn new(labels: Array3<u8>, label_set: Vec<u8>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|l| !label_set.contains(l)) {
            return Err(Error::UnknownLabel(*bad as i64));
        }
        Ok(Self { labels, label_set })
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }
}

// ---- raw + sidecar ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDtype {
    F32,
    U8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    /// `(C, W, D, H)`.
    pub shape: Vec<usize>,
    pub dtype: RawDtype,
    pub byte_order: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Raw,
    Nifti,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path.to_string_lossy();
        if name.ends_with(".nii") {
            Ok(VolumeFormat::Nifti)
        } else if name.ends_with(".raw") {
            Ok(VolumeFormat::Raw)
        } else {
            Err(Error::InvalidArgument(format!(
                "cannot infer volume format from {}",
                path.display()
            )))
        }
    }
}

/// Sidecar path for a raw payload: `foo.raw` -> `foo.json`.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

fn read_sidecar(raw: &Path) -> Result<Sidecar> {
    let path = sidecar_path(raw);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Sidecar {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if sc.shape.len() != 4 {
        return Err(Error::Sidecar {
            path,
            reason: format!("shape must have 4 entries (C,W,D,H), got {:?}", sc.shape),
        });
    }
    if sc.byte_order != "little" {
        return Err(Error::Sidecar {
            path,
            reason: format!("unsupported byte order {}", sc.byte_order),
        });
    }
    Ok(sc)
}

fn write_sidecar(raw: &Path, sc: &Sidecar) -> Result<()> {
    let path = sidecar_path(raw);
    let text = serde_json::to_string_pretty(sc)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_raw_values(raw: &Path) -> Result<(Sidecar, Vec<f32>)> {
    let sc = read_sidecar(raw)?;
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    let expected: usize = sc.shape.iter().product();
    let width = match sc.dtype {
        RawDtype::F32 => 4,
        RawDtype::U8 => 1,
    };
    if bytes.len() != expected * width {
        return Err(Error::Shape(format!(
            "{}: sidecar shape {:?} needs {} values, payload holds {}",
            raw.display(),
            sc.shape,
            expected,
            bytes.len() as f64 / width as f64
        )));
    }
    let values = match sc.dtype {
        RawDtype::F32 => {
            let mut v = vec![0f32; expected];
            LittleEndian::read_f32_into(&bytes, &mut v);
            v
        }
        RawDtype::U8 => bytes.iter().map(|&b| b as f32).collect(),
    };
    Ok((sc, values))
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume> {
    match format {
        VolumeFormat::Raw => {
            let (sc, values) = read_raw_values(path)?;
            let shape = (sc.shape[0], sc.shape[1], sc.shape[2], sc.shape[3]);
            let data = Array4::from_shape_vec(shape, values)
                .map_err(|e| Error::Shape(e.to_string()))?;
            Volume::new(data)
        }
        VolumeFormat::Nifti => read_nifti(path),
    }
}

pub fn save_volume(path: &Path, volume: &Volume, format: VolumeFormat) -> Result<()> {
    match format {
        VolumeFormat::Raw => {
            let std = volume.data.as_standard_layout();
            let values = std.as_slice().expect("standard layout");
            let mut bytes = vec![0u8; values.len() * 4];
            LittleEndian::write_f32_into(values, &mut bytes);
            fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
            write_sidecar(
                path,
                &Sidecar {
                    shape: volume.shape().to_vec(),
                    dtype: RawDtype::F32,
                    byte_order: "little".into(),
                },
            )
        }
        VolumeFormat::Nifti => write_nifti(path, volume),
    }
}

pub fn save_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let std = labels.labels.as_standard_layout();
    let bytes = std.as_slice().expect("standard layout").to_vec();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let [w, d, h] = labels.spatial();
    write_sidecar(
        path,
        &Sidecar {
            shape: vec![1, w, d, h],
            dtype: RawDtype::U8,
            byte_order: "little".into(),
        },
    )
}

/// Loads an integer label map stored either as raw (`u8` or integral `f32`)
/// or as NIfTI.
pub fn load_labels(path: &Path, label_set: &[u8]) -> Result<LabelVolume> {
    let vol = load_volume(path, VolumeFormat::from_path(path)?)?;
    if vol.channels() != 1 {
        return Err(Error::Shape(format!(
            "label volume must have one channel, found {}",
            vol.channels()
        )));
    }
    let [w, d, h] = vol.spatial();
    let mut labels = Array3::<u8>::zeros((w, d, h));
    for (dst, &v) in labels.iter_mut().zip(vol.data.iter()) {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::UnknownLabel(v as i64));
        }
        *dst = v as u8;
    }
    LabelVolume::new(labels, label_set.to_vec())
}

// ---- NIfTI-1 -----------------------------------------------------------------

const NIFTI_HEADER: usize = 348;

fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < NIFTI_HEADER {
        return Err(Error::Nifti("file shorter than 348-byte header".into()));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == 348 {
        parse_nifti::<LittleEndian>(&bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == 348 {
        parse_nifti::<BigEndian>(&bytes)
    } else {
        Err(Error::Nifti("sizeof_hdr is not 348".into()))
    }
}

fn parse_nifti<B: ByteOrder>(bytes: &[u8]) -> Result<Volume> {
    if &bytes[344..347] != b"n+1" {
        return Err(Error::Nifti("only single-file (n+1) images are supported".into()));
    }
    let mut dims = [0i16; 8];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = B::read_i16(&bytes[40 + 2 * i..42 + 2 * i]);
    }
    let ndim = dims[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("invalid dim[0] = {ndim}")));
    }
    let extent = |i: usize| -> usize {
        if i <= ndim as usize {
            dims[i].max(1) as usize
        } else {
            1
        }
    };
    let (x, y, z) = (extent(1), extent(2), extent(3));
    let c: usize = (4..=7).map(extent).product();
    let datatype = B::read_i16(&bytes[70..72]);
    let vox_offset = B::read_f32(&bytes[108..112]) as usize;
    let slope = B::read_f32(&bytes[112..116]);
    let inter = B::read_f32(&bytes[116..120]);
    let n = x * y * z * c;
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(Error::UnsupportedDtype(format!("NIfTI datatype {other}"))),
    };
    let start = vox_offset.max(NIFTI_HEADER);
    if bytes.len() < start + n * width {
        return Err(Error::Shape(format!(
            "NIfTI payload holds {} bytes, header declares {}",
            bytes.len().saturating_sub(start),
            n * width
        )));
    }
    let mut rdr = Cursor::new(&bytes[start..start + n * width]);
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        let v = match datatype {
            2 => rdr.read_u8().map(|v| v as f64),
            256 => rdr.read_i8().map(|v| v as f64),
            4 => rdr.read_i16::<B>().map(|v| v as f64),
            512 => rdr.read_u16::<B>().map(|v| v as f64),
            8 => rdr.read_i32::<B>().map(|v| v as f64),
            768 => rdr.read_u32::<B>().map(|v| v as f64),
            16 => rdr.read_f32::<B>().map(|v| v as f64),
            _ => rdr.read_f64::<B>(),
        }
        .map_err(|e| Error::Nifti(e.to_string()))?;
        raw.push(v);
    }
    let scaled = slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    let mut data = Array4::<f32>::zeros((c, x, y, z));
    // NIfTI stores x fastest; our layout stores H (z) fastest.
    for ci in 0..c {
        for k in 0..z {
            for j in 0..y {
                for i in 0..x {
                    let v = raw[((ci * z + k) * y + j) * x + i];
                    let v = if scaled {
                        v * slope as f64 + inter as f64
                    } else {
                        v
                    };
                    data[[ci, i, j, k]] = v as f32;
                }
            }
        }
    }
    Volume::new(data)
}

fn write_nifti(path: &Path, volume: &Volume) -> Result<()> {
    let [c, x, y, z] = volume.shape();
    let mut hdr = vec![0u8; NIFTI_HEADER + 4];
    LittleEndian::write_i32(&mut hdr[0..4], 348);
    let ndim: i16 = if c > 1 { 4 } else { 3 };
    let dims = [ndim, x as i16, y as i16, z as i16, c as i16, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[40 + 2 * i..42 + 2 * i], *d);
    }
    LittleEndian::write_i16(&mut hdr[70..72], 16);
    LittleEndian::write_i16(&mut hdr[72..74], 32);
    for i in 0..8 {
        LittleEndian::write_f32(&mut hdr[76 + 4 * i..80 + 4 * i], 1.0);
    }
    LittleEndian::write_f32(&mut hdr[108..112], (NIFTI_HEADER + 4) as f32);
    LittleEndian::write_f32(&mut hdr[112..116], 1.0);
    LittleEndian::write_f32(&mut hdr[116..120], 0.0);
    hdr[344..348].copy_from_slice(b"n+1\0");
    let mut payload = vec![0u8; c * x * y * z * 4];
    let mut off = 0;
    for ci in 0..c {
        for k in 0..z {
            for j in 0..y {
                for i in 0..x {
                    LittleEndian::write_f32(&mut payload[off..off + 4], volume.data[[ci, i, j, k]]);
                    off += 4;
                }
            }
        }
    }
    hdr.extend_from_slice(&payload);
    fs::write(path, hdr).map_err(|e| Error::io(path, e))
}

// ---- preprocessing ---------------------------------------------------------

/// Per-channel min-max normalization to `[0, 1]`. Constant channels map to 0.
pub fn normalize_intensity(volume: &Volume) -> Result<Volume> {
    if volume.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cannot normalize NaN/Inf intensities".into()));
    }
    let mut out = volume.data.clone();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        let (lo, hi) = ch
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi > lo {
            let (lo, range) = (lo as f64, hi as f64 - lo as f64);
            ch.mapv_inplace(|v| ((v as f64 - lo) / range) as f32);
        } else {
            ch.fill(0.0);
        }
    }
    Ok(Volume { data: out })
}

/// Non-overlapping `factor^3` mean pooling. Trailing voxels that do not fill
/// a whole window are dropped, so 193 -> 96 at factor 2.
pub fn average_pool_resize(volume: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(Error::InvalidArgument("pool factor must be >= 1".into()));
    }
    let [c, w, d, h] = volume.shape();
    if factor > w.min(d).min(h) {
        return Err(Error::InvalidArgument(format!(
            "pool factor {factor} exceeds spatial extent {:?}",
            [w, d, h]
        )));
    }
    if factor == 1 {
        return Ok(volume.clone());
    }
    let (ow, od, oh) = (w / factor, d / factor, h / factor);
    let norm = (factor * factor * factor) as f64;
    let mut out = Array4::<f32>::zeros((c, ow, od, oh));
    for ci in 0..c {
        for i in 0..ow {
            for j in 0..od {
                for k in 0..oh {
                    let window = volume.data.slice(s![
                        ci,
                        i * factor..(i + 1) * factor,
                        j * factor..(j + 1) * factor,
                        k * factor..(k + 1) * factor
                    ]);
                    let sum: f64 = window.iter().map(|&v| v as f64).sum();
                    out[[ci, i, j, k]] = (sum / norm) as f32;
                }
            }
        }
    }
    Ok(Volume { data: out })
}

fn crop_offsets(src: [usize; 3], target: [usize; 3]) -> Result<[usize; 3]> {
    let mut off = [0; 3];
    for a in 0..3 {
        if target[a] > src[a] || target[a] == 0 {
            return Err(Error::Shape(format!(
                "crop target {target:?} does not fit inside {src:?}"
            )));
        }
        off[a] = (src[a] - target[a]) / 2;
    }
    Ok(off)
}

/// Spatially centred crop; offsets are `floor((src - target) / 2)` per axis.
pub fn center_crop(volume: &Volume, target: [usize; 3]) -> Result<Volume> {
    let o = crop_offsets(volume.spatial(), target)?;
    let data = volume
        .data
        .slice(s![
            ..,
            o[0]..o[0] + target[0],
            o[1]..o[1] + target[1],
            o[2]..o[2] + target[2]
        ])
        .to_owned();
    Ok(Volume { data })
}

pub fn center_crop_labels(labels: &LabelVolume, target: [usize; 3]) -> Result<LabelVolume> {
    let o = crop_offsets(labels.spatial(), target)?;
    let data = labels
        .labels
        .slice(s![
            o[0]..o[0] + target[0],
            o[1]..o[1] + target[1],
            o[2]..o[2] + target[2]
        ])
        .to_owned();
    Ok(LabelVolume {
        labels: data,
        label_set: labels.label_set.clone(),
    })
}

/// Nearest-neighbour downsampling of a label map to match a pooled volume:
/// takes the label at the centre voxel of each window (majority would need
/// ties broken anyway, and the centre keeps thin structures aligned).
pub fn pool_labels(labels: &LabelVolume, factor: usize) -> Result<LabelVolume> {
    if factor == 0 {
        return Err(Error::InvalidArgument("pool factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(labels.clone());
    }
    let [w, d, h] = labels.spatial();
    let (ow, od, oh) = (w / factor, d / factor, h / factor);
    let c = factor / 2;
    let data = Array3::from_shape_fn((ow, od, oh), |(i, j, k)| {
        labels.labels[[i * factor + c, j * factor + c, k * factor + c]]
    });
    Ok(LabelVolume {
        labels: data,
        label_set: labels.label_set.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: [usize; 4], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume {
            data: Array::from_shape_fn(shape, |_| rng.random_range(-5.0f32..5.0)),
        }
    }

    #[test]
    fn raw_round_trip_declared_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let v = random_volume([1, 96, 114, 96], 1);
        save_volume(&path, &v, VolumeFormat::Raw).unwrap();
        let back = load_volume(&path, VolumeFormat::Raw).unwrap();
        assert_eq!(back.shape(), [1, 96, 114, 96]);
        assert_eq!(back, v);
        let sc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("v.json")).unwrap()).unwrap();
        assert_eq!(sc["dtype"], "f32");
        assert_eq!(sc["byte_order"], "little");
    }

    #[test]
    fn raw_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        fs::write(&path, vec![0u8; 7 * 4]).unwrap();
        fs::write(
            dir.path().join("v.json"),
            r#"{"shape":[1,2,2,2],"dtype":"f32","byte_order":"little"}"#,
        )
        .unwrap();
        assert!(matches!(
            load_volume(&path, VolumeFormat::Raw),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn missing_file_is_an_error() {
        let r = load_volume(Path::new("/nonexistent/v.raw"), VolumeFormat::Raw);
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn nifti_round_trip_multichannel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        let v = random_volume([4, 5, 6, 7], 2);
        save_volume(&path, &v, VolumeFormat::Nifti).unwrap();
        assert_eq!(load_volume(&path, VolumeFormat::Nifti).unwrap(), v);
    }

    #[test]
    fn nifti_scaling_applied_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        // int16 volume 2x1x1 with slope 2, intercept 1.
        let mut bytes = vec![0u8; 352];
        LittleEndian::write_i32(&mut bytes[0..4], 348);
        for (i, d) in [3i16, 2, 1, 1, 1, 1, 1, 1].iter().enumerate() {
            LittleEndian::write_i16(&mut bytes[40 + 2 * i..42 + 2 * i], *d);
        }
        LittleEndian::write_i16(&mut bytes[70..72], 4);
        LittleEndian::write_f32(&mut bytes[108..112], 352.0);
        LittleEndian::write_f32(&mut bytes[112..116], 2.0);
        LittleEndian::write_f32(&mut bytes[116..120], 1.0);
        bytes[344..348].copy_from_slice(b"n+1\0");
        bytes.extend_from_slice(&3i16.to_le_bytes());
        bytes.extend_from_slice(&(-1i16).to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let v = load_volume(&path, VolumeFormat::Nifti).unwrap();
        assert_eq!(v.shape(), [1, 2, 1, 1]);
        assert_eq!(v.data[[0, 0, 0, 0]], 7.0);
        assert_eq!(v.data[[0, 1, 0, 0]], -1.0);
    }

    #[test]
    fn nifti_rejects_unknown_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        let mut bytes = vec![0u8; 352];
        LittleEndian::write_i32(&mut bytes[0..4], 348);
        LittleEndian::write_i16(&mut bytes[40..42], 3);
        LittleEndian::write_i16(&mut bytes[70..72], 32);
        bytes[344..348].copy_from_slice(b"n+1\0");
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_volume(&path, VolumeFormat::Nifti),
            Err(Error::UnsupportedDtype(_))
        ));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.raw");
        let mut l = Array3::<u8>::zeros((3, 4, 5));
        l[[1, 2, 3]] = 4;
        l[[0, 0, 0]] = 2;
        let lv = LabelVolume::new(l, BRATS_LABELS.to_vec()).unwrap();
        save_labels(&path, &lv).unwrap();
        assert_eq!(load_labels(&path, &BRATS_LABELS).unwrap(), lv);
        assert!(matches!(
            LabelVolume::new(Array3::from_elem((1, 1, 1), 3), BRATS_LABELS.to_vec()),
            Err(Error::UnknownLabel(3))
        ));
    }

    #[test]
    fn normalize_affine_and_constant() {
        let data = Array4::from_shape_vec((2, 3, 1, 1), vec![2.0, 4.0, 6.0, 5.0, 5.0, 5.0]).unwrap();
        let n = normalize_intensity(&Volume { data }).unwrap();
        assert_eq!(n.data.as_slice().unwrap(), &[0.0, 0.5, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_nan() {
        let mut v = Volume::zeros([1, 2, 2, 2]);
        v.data[[0, 1, 1, 1]] = f32::NAN;
        assert!(matches!(normalize_intensity(&v), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn normalize_hits_exact_bounds_and_is_idempotent(seed in 0u64..1000) {
            let v = random_volume([2, 4, 3, 5], seed);
            let n = normalize_intensity(&v).unwrap();
            for ch in n.data.axis_iter(Axis(0)) {
                let lo = ch.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = ch.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                prop_assert_eq!(lo, 0.0);
                prop_assert_eq!(hi, 1.0);
            }
            prop_assert_eq!(normalize_intensity(&n).unwrap(), n);
        }

        #[test]
        fn pooling_preserves_mean_of_retained_region(seed in 0u64..1000, w in 2usize..9, d in 2usize..9, h in 2usize..9) {
            let v = random_volume([1, w, d, h], seed);
            let p = average_pool_resize(&v, 2).unwrap();
            let retained = v.data.slice(s![.., ..(w / 2) * 2, ..(d / 2) * 2, ..(h / 2) * 2]);
            let m0: f64 = retained.iter().map(|&x| x as f64).sum::<f64>() / retained.len() as f64;
            let m1: f64 = p.data.iter().map(|&x| x as f64).sum::<f64>() / p.data.len() as f64;
            prop_assert!((m0 - m1).abs() <= 1e-6 * m0.abs().max(1.0));
        }
    }

    #[test]
    fn pool_shapes_and_values() {
        let v = Volume::zeros([1, 193, 229, 193]);
        assert_eq!(average_pool_resize(&v, 2).unwrap().shape(), [1, 96, 114, 96]);
        let ones = Volume {
            data: Array4::ones((1, 4, 4, 4)),
        };
        let p = average_pool_resize(&ones, 2).unwrap();
        assert_eq!(p.shape(), [1, 2, 2, 2]);
        assert!(p.data.iter().all(|&x| x == 1.0));
        assert!(average_pool_resize(&Volume::zeros([1, 3, 8, 8]), 4).is_err());
    }

    #[test]
    fn pool_matches_windowed_mean_oracle() {
        let v = random_volume([1, 5, 5, 5], 9);
        let p = average_pool_resize(&v, 2).unwrap();
        assert_eq!(p.shape(), [1, 2, 2, 2]);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let mut sum = 0.0f64;
                    for a in 0..2 {
                        for b in 0..2 {
                            for c in 0..2 {
                                sum += v.data[[0, 2 * i + a, 2 * j + b, 2 * k + c]] as f64;
                            }
                        }
                    }
                    assert!((p.data[[0, i, j, k]] as f64 - sum / 8.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn crop_shapes_identity_and_offsets() {
        let v = Volume::zeros([4, 240, 240, 155]);
        assert_eq!(center_crop(&v, [160, 192, 128]).unwrap().shape(), [4, 160, 192, 128]);
        let r = random_volume([1, 6, 5, 4], 3);
        assert_eq!(center_crop(&r, [6, 5, 4]).unwrap(), r);
        assert!(center_crop(&r, [7, 5, 4]).is_err());

        // Coordinate ramp: value encodes (i, j, k) so the crop reveals its offset.
        let ramp = Volume {
            data: Array4::from_shape_fn((1, 11, 8, 7), |(_, i, j, k)| (i * 10000 + j * 100 + k) as f32),
        };
        let c = center_crop(&ramp, [4, 5, 2]).unwrap();
        let v = c.data[[0, 0, 0, 0]] as usize;
        assert_eq!((v / 10000, (v / 100) % 100, v % 100), ((11 - 4) / 2, (8 - 5) / 2, (7 - 2) / 2));
    }

    #[test]
    fn label_crop_matches_volume_crop() {
        let l = Array3::from_shape_fn((6, 6, 6), |(i, _, _)| if i == 3 { 4u8 } else { 0 });
        let lv = LabelVolume::new(l, BRATS_LABELS.to_vec()).unwrap();
        let c = center_crop_labels(&lv, [2, 2, 2]).unwrap();
        assert_eq!(c.labels[[1, 0, 0]], 4);
        assert_eq!(c.labels[[0, 0, 0]], 0);
    }
}
