//! Single-slice extraction and 8-bit PNG rendering.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vbquant_core::volume::{window_value, Volume, VolumeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "x" | "sagittal" => Ok(Axis::X),
            "y" | "coronal" => Ok(Axis::Y),
            "z" | "axial" => Ok(Axis::Z),
            _ => Err(format!("unknown axis {s:?}")),
        }
    }
}

/// Slice size and the flat voxel index of each pixel, row-major.
pub fn slice_indices(dims: [usize; 3], axis: Axis, index: usize) -> Option<(usize, usize, Vec<usize>)> {
    let [nx, ny, nz] = dims;
    let at = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let (w, h, f): (usize, usize, Box<dyn Fn(usize, usize) -> usize>) = match axis {
        Axis::Z if index < nz => (nx, ny, Box::new(move |u, v| at(u, v, index))),
        Axis::Y if index < ny => (nx, nz, Box::new(move |u, v| at(u, index, v))),
        Axis::X if index < nx => (ny, nz, Box::new(move |u, v| at(index, u, v))),
        _ => return None,
    };
    let idx = (0..h).flat_map(|v| (0..w).map(move |u| (u, v))).map(|(u, v)| f(u, v)).collect();
    Some((w, h, idx))
}

/// Windowed value in `[0, 1]` mapped to a byte.
pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round() as u8
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("slice {index} is out of range along {axis:?}")]
    OutOfRange { axis: Axis, index: usize },
    #[error(transparent)]
    Window(#[from] VolumeError),
    #[error(transparent)]
    Png(#[from] png::EncodingError),
}

/// Grayscale PNG of one slice under the given window.
pub fn slice_png(volume: &Volume, axis: Axis, index: usize, level: f32, width: f32) -> Result<Vec<u8>, RenderError> {
    if !(width > 0.0) {
        return Err(VolumeError::BadWindowWidth(width).into());
    }
    let (w, h, idx) = slice_indices(volume.dims(), axis, index).ok_or(RenderError::OutOfRange { axis, index })?;
    let pixels: Vec<u8> = idx.iter().map(|&i| quantize(window_value(volume.data()[i], level, width))).collect();
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&pixels)?;
    writer.finish()?;
    Ok(out)
}
