//! Run-length encoding of binary masks, one run list per axial slice.
//!
//! Runs are `[start, length]` pairs over the row-major pixels of a slice
//! (`start = x + nx * y`), sorted and non-adjacent.

use serde::{Deserialize, Serialize};
use vbquant_core::vbnet::INFECTION_LABEL;
use vbquant_core::volume::{Geometry, LabelMask, VolumeError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RleError {
    #[error("expected {expected} slices, got {got}")]
    SliceCount { expected: usize, got: usize },
    #[error("slice {slice}: run [{start}, {len}] is empty, unsorted, overlapping or out of bounds")]
    BadRun { slice: usize, start: usize, len: usize },
    #[error("mask dims {got:?} do not match volume dims {expected:?}")]
    Dims { expected: [usize; 3], got: [usize; 3] },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Run = [usize; 2];

/// Runs of `true` in a flat pixel slice.
pub fn encode_runs(pixels: &[bool]) -> Vec<Run> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < pixels.len() {
        if pixels[i] {
            let start = i;
            while i < pixels.len() && pixels[i] {
                i += 1;
            }
            runs.push([start, i - start]);
        } else {
            i += 1;
        }
    }
    runs
}

/// Inverse of [`encode_runs`]; rejects malformed run lists.
pub fn decode_runs(runs: &[Run], len: usize, slice: usize) -> Result<Vec<bool>, RleError> {
    let mut out = vec![false; len];
    let mut next = 0;
    for (k, &[start, n]) in runs.iter().enumerate() {
        let bad = RleError::BadRun { slice, start, len: n };
        // adjacent runs would have been merged by the encoder
        if n == 0 || start < next || (k > 0 && start == next) || start.checked_add(n).map_or(true, |e| e > len) {
            return Err(bad);
        }
        out[start..start + n].fill(true);
        next = start + n;
    }
    Ok(out)
}

/// A whole binary mask, encoded slice by slice along `z`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub dims: [usize; 3],
    pub slices: Vec<Vec<Run>>,
}

impl MaskRle {
    pub fn encode(mask: &LabelMask) -> Self {
        let [nx, ny, nz] = mask.dims();
        let fg = mask.foreground();
        let plane = nx * ny;
        Self {
            dims: [nx, ny, nz],
            slices: (0..nz).map(|z| encode_runs(&fg[z * plane..(z + 1) * plane])).collect(),
        }
    }

    pub fn voxels(&self) -> Result<Vec<bool>, RleError> {
        let [nx, ny, nz] = self.dims;
        if self.slices.len() != nz {
            return Err(RleError::SliceCount {
                expected: nz,
                got: self.slices.len(),
            });
        }
        let mut out = Vec::with_capacity(nx * ny * nz);
        for (z, runs) in self.slices.iter().enumerate() {
            out.extend(decode_runs(runs, nx * ny, z)?);
        }
        Ok(out)
    }

    /// Binary infection mask on `geometry`.
    pub fn decode(&self, geometry: &Geometry) -> Result<LabelMask, RleError> {
        if self.dims != geometry.dims {
            return Err(RleError::Dims {
                expected: geometry.dims,
                got: self.dims,
            });
        }
        Ok(LabelMask::binary(*geometry, &self.voxels()?, INFECTION_LABEL)?)
    }

    pub fn count(&self) -> usize {
        self.slices.iter().flatten().map(|r| r[1]).sum()
    }
}
