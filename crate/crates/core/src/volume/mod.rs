//! CT volumes, label masks and HU windowing.
//!
//! Voxels are stored with `x` varying fastest, then `y`, then `z`
//! (`index = x + nx * (y + ny * z)`), the NIfTI on-disk order.

mod nifti;

pub use nifti::{
    read_nifti, sidecar_path, write_nifti, write_nifti_with, Grid, GridRef, LoadReport, Loaded, NiftiError, WriteOptions,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Lowest HU value kept on load.
pub const HU_MIN: f32 = -1024.0;
/// Highest HU value kept on load.
pub const HU_MAX: f32 = 3071.0;

/// Lung reading window level (HU).
pub const LUNG_WINDOW_LEVEL: f32 = -600.0;
/// Lung reading window width (HU).
pub const LUNG_WINDOW_WIDTH: f32 = 1200.0;
/// Mediastinal reading window level (HU).
pub const MEDIASTINAL_WINDOW_LEVEL: f32 = 40.0;
/// Mediastinal reading window width (HU).
pub const MEDIASTINAL_WINDOW_WIDTH: f32 = 350.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VolumeError {
    #[error("dimensions must be positive, got {0:?}")]
    BadDims([usize; 3]),
    #[error("spacing must be strictly positive, got {0:?}")]
    BadSpacing([f32; 3]),
    #[error("data length {len} does not match dims {dims:?}")]
    DataLength { len: usize, dims: [usize; 3] },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("label {0} has no name in the label dictionary")]
    UnnamedLabel(u16),
    #[error("window width must be positive, got {0}")]
    BadWindowWidth(f32),
}

/// Grid geometry shared by a volume and its masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// mm per voxel along `(x, y, z)`.
    pub spacing: [f32; 3],
    /// mm, position of voxel `(0, 0, 0)`.
    pub origin: [f32; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], origin: [f32; 3]) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::BadDims(dims));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Unit-spaced geometry at the origin.
    pub fn isotropic(dims: [usize; 3]) -> Self {
        Self::new(dims, [1.0; 3], [0.0; 3]).expect("valid dims")
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().map(|&s| s as f64).product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn ensure_same(&self, other: &Geometry) -> Result<(), VolumeError> {
        if self != other {
            return Err(VolumeError::GeometryMismatch(format!(
                "{:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )));
        }
        Ok(())
    }
}

/// Scalar CT volume in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    /// Build a volume, clamping values to `[HU_MIN, HU_MAX]`.
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self, VolumeError> {
        Self::new_counting_clamps(geometry, data).map(|(v, _)| v)
    }

    /// Like [`Volume::new`], also returning how many values were clamped.
    pub fn new_counting_clamps(geometry: Geometry, mut data: Vec<f32>) -> Result<(Self, usize), VolumeError> {
        if data.len() != geometry.voxel_count() {
            return Err(VolumeError::DataLength {
                len: data.len(),
                dims: geometry.dims,
            });
        }
        let mut clamped = 0;
        for v in &mut data {
            let c = if v.is_nan() { HU_MIN } else { v.clamp(HU_MIN, HU_MAX) };
            if c != *v || v.is_nan() {
                clamped += 1;
                *v = c;
            }
        }
        Ok((Self { geometry, data }, clamped))
    }

    pub fn filled(geometry: Geometry, hu: f32) -> Self {
        Self::new(geometry, vec![hu; geometry.voxel_count()]).expect("length matches")
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }
}

/// Integer label grid aligned to a [`Volume`], with a label dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    geometry: Geometry,
    labels: Vec<u16>,
    names: BTreeMap<u16, String>,
}

impl LabelMask {
    pub fn new(geometry: Geometry, labels: Vec<u16>, names: BTreeMap<u16, String>) -> Result<Self, VolumeError> {
        if labels.len() != geometry.voxel_count() {
            return Err(VolumeError::DataLength {
                len: labels.len(),
                dims: geometry.dims,
            });
        }
        let mut seen = [false; u16::MAX as usize + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        for (l, &present) in seen.iter().enumerate().skip(1) {
            if present && !names.contains_key(&(l as u16)) {
                return Err(VolumeError::UnnamedLabel(l as u16));
            }
        }
        Ok(Self { geometry, labels, names })
    }

    /// Binary mask (`0` background, `1` = `name`) from a boolean grid.
    pub fn binary(geometry: Geometry, voxels: &[bool], name: &str) -> Result<Self, VolumeError> {
        let labels = voxels.iter().map(|&b| b as u16).collect();
        Self::new(geometry, labels, BTreeMap::from([(1, name.to_string())]))
    }

    pub fn empty(geometry: Geometry, name: &str) -> Self {
        Self::binary(geometry, &vec![false; geometry.voxel_count()], name).expect("valid")
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn names(&self) -> &BTreeMap<u16, String> {
        &self.names
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Voxels with a nonzero label.
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    /// Voxels carrying exactly `label`.
    pub fn select(&self, label: u16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Map HU to `[0, 1]` through a window: `clamp((hu - (level - width/2)) / width, 0, 1)`.
pub fn window_value(hu: f32, level: f32, width: f32) -> f32 {
    ((hu - (level - width / 2.0)) / width).clamp(0.0, 1.0)
}

/// Window every voxel of `volume`.
pub fn apply_window(volume: &Volume, level: f32, width: f32) -> Result<Vec<f32>, VolumeError> {
    if !(width > 0.0) {
        return Err(VolumeError::BadWindowWidth(width));
    }
    Ok(volume.data().iter().map(|&hu| window_value(hu, level, width)).collect())
}

/// Lung-window normalisation used as network input.
pub fn lung_window(volume: &Volume) -> Vec<f32> {
    apply_window(volume, LUNG_WINDOW_LEVEL, LUNG_WINDOW_WIDTH).expect("positive width")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn window_examples() {
        assert_eq!(window_value(-600.0, -600.0, 1200.0), 0.5);
        assert_eq!(window_value(40.0, 40.0, 350.0), 0.5);
        assert_eq!(window_value(-1200.0, LUNG_WINDOW_LEVEL, LUNG_WINDOW_WIDTH), 0.0);
        assert_eq!(window_value(-300.0, LUNG_WINDOW_LEVEL, LUNG_WINDOW_WIDTH), 0.75);
        let v = Volume::filled(Geometry::isotropic([1, 1, 1]), 0.0);
        assert_eq!(apply_window(&v, 0.0, 0.0), Err(VolumeError::BadWindowWidth(0.0)));
        assert!(apply_window(&v, 0.0, -5.0).is_err());
    }

    #[test]
    fn clamps_on_construction() {
        let g = Geometry::isotropic([3, 1, 1]);
        let (v, n) = Volume::new_counting_clamps(g, vec![-5000.0, 0.0, 4000.0]).unwrap();
        assert_eq!(v.data(), &[HU_MIN, 0.0, HU_MAX]);
        assert_eq!(n, 2);
    }

    #[test]
    fn geometry_validation() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        let g = Geometry::isotropic([4, 3, 2]);
        let i = g.index(3, 2, 1);
        assert_eq!(g.coords(i), [3, 2, 1]);
    }

    #[test]
    fn unnamed_label_rejected() {
        let g = Geometry::isotropic([2, 1, 1]);
        let names = BTreeMap::from([(1, "a".to_string())]);
        assert_eq!(LabelMask::new(g, vec![1, 2], names), Err(VolumeError::UnnamedLabel(2)));
    }

    proptest! {
        #[test]
        fn window_bounded_and_monotone(a in -3000.0f32..3000.0, b in -3000.0f32..3000.0,
                                       level in -1000.0f32..500.0, width in 1.0f32..3000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let wl = window_value(lo, level, width);
            let wh = window_value(hi, level, width);
            prop_assert!((0.0..=1.0).contains(&wl) && (0.0..=1.0).contains(&wh));
            prop_assert!(wl <= wh);
        }
    }
}
