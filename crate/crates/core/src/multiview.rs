//! Geometry between 3D volumes and per-plane slice sequences.
//!
//! Sagittal slices index `W`, coronal slices index `D`, axial slices index
//! `H`. Feature volumes are channel-first `(F, W, D, H)`.

use std::fmt;

use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaneId {
    Sagittal,
    Coronal,
    Axial,
}

impl PlaneId {
    /// Fixed processing and channel-concatenation order.
    pub const ALL: [PlaneId; 3] = [PlaneId::Sagittal, PlaneId::Coronal, PlaneId::Axial];

    /// Stable integer code used for segment encodings.
    pub fn code(self) -> usize {
        match self {
            PlaneId::Sagittal => 0,
            PlaneId::Coronal => 1,
            PlaneId::Axial => 2,
        }
    }

    /// Spatial axis of a `(W, D, H)` grid indexed by this plane's slices.
    pub fn axis(self) -> usize {
        self.code()
    }

    pub fn name(self) -> &'static str {
        match self {
            PlaneId::Sagittal => "sagittal",
            PlaneId::Coronal => "coronal",
            PlaneId::Axial => "axial",
        }
    }

    /// Slice count for a `(W, D, H)` grid.
    pub fn slice_count(self, grid: [usize; 3]) -> usize {
        grid[self.axis()]
    }

    /// In-plane `(a, b)` extent of a slice of a `(W, D, H)` grid.
    pub fn slice_shape(self, grid: [usize; 3]) -> [usize; 2] {
        let [w, d, h] = grid;
        match self {
            PlaneId::Sagittal => [d, h],
            PlaneId::Coronal => [w, h],
            PlaneId::Axial => [w, d],
        }
    }
}

impl fmt::Display for PlaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered 2D slices `(C, a, b)` of one volume along one plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSliceSet {
    pub plane: PlaneId,
    pub slices: Vec<Array3<f32>>,
}

impl PlaneSliceSet {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Per-plane slice sets in [`PlaneId::ALL`] order.
pub fn decompose(volume: &Volume) -> [PlaneSliceSet; 3] {
    PlaneId::ALL.map(|plane| PlaneSliceSet {
        plane,
        slices: volume
            .data
            .axis_iter(Axis(plane.axis() + 1))
            .map(|s| s.to_owned())
            .collect(),
    })
}

/// Stacks slices back along the plane axis; exact inverse of [`decompose`].
pub fn recompose(set: &PlaneSliceSet) -> Result<Volume> {
    let first = set
        .slices
        .first()
        .ok_or_else(|| Error::Empty("slice set has no slices".into()))?;
    if let Some(bad) = set.slices.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::Shape(format!(
            "inconsistent slice shapes {:?} vs {:?}",
            bad.shape(),
            first.shape()
        )));
    }
    let views: Vec<_> = set.slices.iter().map(|s| s.view()).collect();
    let data = ndarray::stack(Axis(set.plane.axis() + 1), &views)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(Volume { data })
}

/// Network input for one plane: `(N, a, b, C)` channel-last `f64` slices.
pub fn plane_tensor(volume: &Volume, plane: PlaneId) -> ArrayD<f64> {
    // (C, W, D, H) -> move the plane axis first, channels last.
    let axes = match plane {
        PlaneId::Sagittal => [1, 2, 3, 0],
        PlaneId::Coronal => [2, 1, 3, 0],
        PlaneId::Axial => [3, 1, 2, 0],
    };
    volume
        .data
        .view()
        .permuted_axes(axes)
        .mapv(|v| v as f64)
        .as_standard_layout()
        .into_owned()
        .into_dyn()
}

/// Dense 3D feature map `(F, W, D, H)` with a record of what was concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub data: Array4<f64>,
    pub provenance: Vec<String>,
}

impl FeatureVolume {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// Voxel-major `(W*D*H, F)` view used by the prediction heads.
    pub fn to_voxel_rows(&self) -> Array2<f64> {
        let f = self.channels();
        let v = self.data.len() / f.max(1);
        self.data
            .view()
            .permuted_axes([1, 2, 3, 0])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((v, f))
            .expect("contiguous")
    }

    pub fn from_voxel_rows(rows: &Array2<f64>, grid: [usize; 3], provenance: Vec<String>) -> Self {
        let f = rows.ncols();
        let data = rows
            .to_owned()
            .into_shape_with_order((grid[0], grid[1], grid[2], f))
            .expect("row count matches grid")
            .permuted_axes([3, 0, 1, 2])
            .as_standard_layout()
            .into_owned();
        Self { data, provenance }
    }
}

/// Replicates each slice's encoding across that slice's in-plane axes.
pub fn broadcast_encodings(
    encodings: &Array2<f64>,
    plane: PlaneId,
    grid: [usize; 3],
) -> Result<FeatureVolume> {
    let n = plane.slice_count(grid);
    if encodings.nrows() != n {
        return Err(Error::Shape(format!(
            "{plane} sequence has {} encodings, grid {grid:?} needs {n}",
            encodings.nrows()
        )));
    }
    let d = encodings.ncols();
    let mut data = Array4::<f64>::zeros((d, grid[0], grid[1], grid[2]));
    for (idx, enc) in encodings.rows().into_iter().enumerate() {
        for (c, &v) in enc.iter().enumerate() {
            let mut ch = data.index_axis_mut(Axis(0), c);
            ch.index_axis_mut(Axis(plane.axis()), idx).fill(v);
        }
    }
    Ok(FeatureVolume {
        data,
        provenance: vec![format!("encodings.{plane}")],
    })
}

/// Channel concatenation in the fixed order sagittal, coronal, axial, then
/// any extra (multi-scale) maps in the order given.
pub fn fuse_planes(
    sagittal: &FeatureVolume,
    coronal: &FeatureVolume,
    axial: &FeatureVolume,
    extra: &[FeatureVolume],
) -> Result<FeatureVolume> {
    let parts: Vec<&FeatureVolume> = [sagittal, coronal, axial]
        .into_iter()
        .chain(extra.iter())
        .collect();
    let grid = sagittal.spatial();
    if let Some(bad) = parts.iter().find(|p| p.spatial() != grid) {
        return Err(Error::Shape(format!(
            "cannot fuse feature maps with spatial shapes {:?} and {:?}",
            grid,
            bad.spatial()
        )));
    }
    let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
    let data = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(FeatureVolume {
        data,
        provenance: parts.iter().flat_map(|p| p.provenance.clone()).collect(),
    })
}

/// Channel range `[lo, hi)` of a fused feature volume.
pub fn channel_slice(fv: &FeatureVolume, lo: usize, hi: usize) -> Array4<f64> {
    fv.data.slice(s![lo..hi, .., .., ..]).to_owned()
}

/// Stacks per-slice channel-last maps `(N, a, b, C)` of `plane` into a
/// channel-last `(W', D', H', C)` map where the plane axis keeps `N` slices.
pub fn stack_slice_maps(maps: &ArrayD<f64>, plane: PlaneId) -> ArrayD<f64> {
    let axes = stack_axes(plane);
    maps.view()
        .permuted_axes(IxDyn(&axes))
        .as_standard_layout()
        .into_owned()
}

/// Axis permutation from `(N, a, b, C)` slice-major layout to the
/// `(W, D, H, C)` grid layout.
pub fn stack_axes(plane: PlaneId) -> [usize; 4] {
    match plane {
        PlaneId::Sagittal => [0, 1, 2, 3],
        PlaneId::Coronal => [1, 0, 2, 3],
        PlaneId::Axial => [1, 2, 0, 3],
    }
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
            data: Array::from_shape_fn(shape, |_| rng.random::<f32>()),
        }
    }

    #[test]
    fn decompose_counts_and_shapes() {
        let v = Volume::zeros([1, 96, 114, 96]);
        let [sag, cor, ax] = decompose(&v);
        assert_eq!((sag.len(), cor.len(), ax.len()), (96, 114, 96));
        assert_eq!(sag.slices[0].shape(), &[1, 114, 96]);
        assert_eq!(cor.slices[0].shape(), &[1, 96, 96]);
        assert_eq!(ax.slices[0].shape(), &[1, 96, 114]);

        let one = Volume::zeros([1, 1, 1, 1]);
        for set in decompose(&one) {
            assert_eq!(set.len(), 1);
            assert_eq!(set.slices[0].shape(), &[1, 1, 1]);
        }
    }

    #[test]
    fn slice_k_is_the_kth_section() {
        let v = random_volume([2, 3, 4, 5], 1);
        let [sag, cor, ax] = decompose(&v);
        assert_eq!(sag.slices[2][[1, 3, 4]], v.data[[1, 2, 3, 4]]);
        assert_eq!(cor.slices[3][[1, 2, 4]], v.data[[1, 2, 3, 4]]);
        assert_eq!(ax.slices[4][[1, 2, 3]], v.data[[1, 2, 3, 4]]);
    }

    #[test]
    fn recompose_single_slice_and_errors() {
        let set = PlaneSliceSet {
            plane: PlaneId::Coronal,
            slices: vec![Array3::ones((1, 3, 2))],
        };
        assert_eq!(recompose(&set).unwrap().shape(), [1, 3, 1, 2]);
        let bad = PlaneSliceSet {
            plane: PlaneId::Axial,
            slices: vec![Array3::ones((1, 3, 2)), Array3::ones((1, 2, 2))],
        };
        assert!(matches!(recompose(&bad), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn recompose_inverts_decompose(seed in 0u64..500, c in 1usize..3, w in 1usize..6, d in 1usize..6, h in 1usize..6) {
            let v = random_volume([c, w, d, h], seed);
            for set in decompose(&v) {
                prop_assert_eq!(&recompose(&set).unwrap(), &v);
            }
        }
    }

    #[test]
    fn plane_tensor_matches_slices() {
        let v = random_volume([2, 3, 4, 5], 7);
        for set in decompose(&v) {
            let t = plane_tensor(&v, set.plane);
            for (n, sl) in set.slices.iter().enumerate() {
                for ((c, a, b), &val) in sl.indexed_iter() {
                    assert_eq!(t[[n, a, b, c]], val as f64);
                }
            }
        }
    }

    #[test]
    fn broadcast_definition() {
        let e = Array2::from_shape_vec((2, 1), vec![3.0, 5.0]).unwrap();
        let fv = broadcast_encodings(&e, PlaneId::Sagittal, [2, 3, 4]).unwrap();
        assert!(fv.data.index_axis(Axis(1), 0).iter().all(|&v| v == 3.0));
        assert!(fv.data.index_axis(Axis(1), 1).iter().all(|&v| v == 5.0));
        assert!(broadcast_encodings(&e, PlaneId::Coronal, [2, 3, 4]).is_err());

        let same = Array2::from_elem((4, 3), 0.7);
        let fv = broadcast_encodings(&same, PlaneId::Axial, [2, 3, 4]).unwrap();
        assert!(fv.data.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn broadcast_pointwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = [3, 4, 5];
        for plane in PlaneId::ALL {
            let n = plane.slice_count(grid);
            let e = Array2::from_shape_fn((n, 4), |_| rng.random::<f64>());
            let fv = broadcast_encodings(&e, plane, grid).unwrap();
            for ((c, i, j, k), &v) in fv.data.indexed_iter() {
                let idx = [i, j, k][plane.axis()];
                assert_eq!(v, e[[idx, c]]);
            }
        }
    }

    #[test]
    fn fuse_order_and_slicing() {
        let grid = [2, 3, 2];
        let mk = |val: f64| FeatureVolume {
            data: Array4::from_elem((16, grid[0], grid[1], grid[2]), val),
            provenance: vec![format!("{val}")],
        };
        let zero_cor = fuse_planes(&mk(1.0), &mk(0.0), &mk(2.0), &[]).unwrap();
        assert_eq!(zero_cor.channels(), 48);
        assert!(channel_slice(&zero_cor, 16, 32).iter().all(|&v| v == 0.0));
        assert!(channel_slice(&zero_cor, 0, 16).iter().all(|&v| v == 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rnd = |f: usize, rng: &mut ChaCha8Rng| FeatureVolume {
            data: Array4::from_shape_fn((f, 2, 3, 2), |_| rng.random::<f64>()),
            provenance: vec![],
        };
        let (a, b, c, x) = (rnd(4, &mut rng), rnd(4, &mut rng), rnd(4, &mut rng), rnd(3, &mut rng));
        let fused = fuse_planes(&a, &b, &c, std::slice::from_ref(&x)).unwrap();
        assert_eq!(channel_slice(&fused, 0, 4), a.data);
        assert_eq!(channel_slice(&fused, 4, 8), b.data);
        assert_eq!(channel_slice(&fused, 8, 12), c.data);
        assert_eq!(channel_slice(&fused, 12, 15), x.data);

        let wrong = FeatureVolume {
            data: Array4::zeros((4, 2, 2, 2)),
            provenance: vec![],
        };
        assert!(fuse_planes(&a, &b, &wrong, &[]).is_err());
    }

    #[test]
    fn voxel_rows_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fv = FeatureVolume {
            data: Array4::from_shape_fn((3, 2, 3, 4), |_| rng.random::<f64>()),
            provenance: vec![],
        };
        let rows = fv.to_voxel_rows();
        assert_eq!(rows[[(1 * 3 + 2) * 4 + 3, 2]], fv.data[[2, 1, 2, 3]]);
        assert_eq!(FeatureVolume::from_voxel_rows(&rows, [2, 3, 4], vec![]).data, fv.data);
    }

    #[test]
    fn stacked_maps_land_on_grid_axes() {
        let v = random_volume([1, 3, 4, 5], 8);
        for plane in PlaneId::ALL {
            let t = plane_tensor(&v, plane);
            let stacked = stack_slice_maps(&t, plane);
            assert_eq!(stacked.shape(), &[3, 4, 5, 1]);
            for ((i, j, k), &val) in v.data.index_axis(Axis(0), 0).indexed_iter() {
                assert_eq!(stacked[[i, j, k, 0]], val as f64);
            }
        }
    }
}
