//! Single-file NIfTI-1 (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only little-endian files with `uint8`, `int16` or `float32` payloads and
//! axis-aligned geometry are supported. Label dictionaries travel in a JSON
//! sidecar named `<basename>.labels.json`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Geometry, LabelMask, Volume, VolumeError};

const HEADER_SIZE: i32 = 348;
const DATA_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, thiserror::Error)]
pub enum NiftiError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: sizeof_hdr is {0}, expected 348")]
    SizeofHdr(i32),
    #[error("malformed header: magic is {0:?}, expected \"n+1\\0\"")]
    Magic([u8; 4]),
    #[error("unsupported datatype code {0} (accepted: uint8=2, int16=4, float32=16)")]
    Datatype(i16),
    #[error("dim[0] is {0}, only 3-D volumes are supported")]
    DimCount(i16),
    #[error("dim[{axis}] is {value}, must be positive")]
    DimValue { axis: usize, value: i16 },
    #[error("bitpix {bitpix} inconsistent with datatype {datatype}")]
    Bitpix { datatype: i16, bitpix: i16 },
    #[error("vox_offset {0} is invalid (must be >= 352)")]
    VoxOffset(f32),
    #[error("{0} encodes a rotation or flip; only axis-aligned scaling is supported")]
    Rotation(&'static str),
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("negative label value {0} in label mask")]
    NegativeLabel(i16),
    #[error("label value {0} does not fit the on-disk label types")]
    LabelRange(u16),
    #[error("sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

type Result<T> = std::result::Result<T, NiftiError>;

/// A decoded NIfTI grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Volume(Volume),
    Mask(LabelMask),
}

impl Grid {
    pub fn geometry(&self) -> &Geometry {
        match self {
            Grid::Volume(v) => v.geometry(),
            Grid::Mask(m) => m.geometry(),
        }
    }
}

/// Borrowed grid accepted by the writer.
#[derive(Debug, Clone, Copy)]
pub enum GridRef<'a> {
    Volume(&'a Volume),
    Mask(&'a LabelMask),
}

impl<'a> From<&'a Volume> for GridRef<'a> {
    fn from(v: &'a Volume) -> Self {
        GridRef::Volume(v)
    }
}

impl<'a> From<&'a LabelMask> for GridRef<'a> {
    fn from(m: &'a LabelMask) -> Self {
        GridRef::Mask(m)
    }
}

impl<'a> From<&'a Grid> for GridRef<'a> {
    fn from(g: &'a Grid) -> Self {
        match g {
            Grid::Volume(v) => GridRef::Volume(v),
            Grid::Mask(m) => GridRef::Mask(m),
        }
    }
}

/// Side information gathered while loading.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// Values pulled into the HU clamp range.
    pub clamped_voxels: usize,
    pub datatype: i16,
    /// Header `descrip` field, trailing NULs removed.
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub grid: Grid,
    pub report: LoadReport,
}

impl Loaded {
    pub fn into_volume(self) -> Option<Volume> {
        match self.grid {
            Grid::Volume(v) => Some(v),
            Grid::Mask(_) => None,
        }
    }

    pub fn into_mask(self) -> Option<LabelMask> {
        match self.grid {
            Grid::Mask(m) => Some(m),
            Grid::Volume(_) => None,
        }
    }
}

/// Path of the label sidecar for a NIfTI path.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let base = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    path.with_file_name(format!("{base}.labels.json"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NiftiError + '_ {
    move |source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes([self.0[at], self.0[at + 1]])
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.0[at..at + 4].try_into().unwrap())
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.0[at..at + 4].try_into().unwrap())
    }
}

/// Read a NIfTI-1 file. Integer files with a label sidecar load as a
/// [`LabelMask`]; everything else loads as a [`Volume`] in HU.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io_err(path))?;
        raw = out;
    }
    let sidecar = sidecar_path(path);
    let names = if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
        let names: BTreeMap<u16, String> =
            serde_json::from_str(&text).map_err(|source| NiftiError::Sidecar { path: sidecar, source })?;
        Some(names)
    } else {
        None
    };
    decode(&raw, names)
}

fn decode(raw: &[u8], names: Option<BTreeMap<u16, String>>) -> Result<Loaded> {
    if raw.len() < HEADER_SIZE as usize {
        return Err(NiftiError::Truncated {
            needed: HEADER_SIZE as usize,
            available: raw.len(),
        });
    }
    let h = Reader(raw);
    let sizeof_hdr = h.i32(0);
    if sizeof_hdr != HEADER_SIZE {
        return Err(NiftiError::SizeofHdr(sizeof_hdr));
    }
    let magic: [u8; 4] = raw[344..348].try_into().unwrap();
    if &magic != MAGIC {
        return Err(NiftiError::Magic(magic));
    }
    let ndim = h.i16(40);
    if ndim != 3 {
        return Err(NiftiError::DimCount(ndim));
    }
    let mut dims = [0usize; 3];
    for (axis, d) in dims.iter_mut().enumerate() {
        let value = h.i16(42 + 2 * axis);
        if value <= 0 {
            return Err(NiftiError::DimValue { axis: axis + 1, value });
        }
        *d = value as usize;
    }
    let datatype = h.i16(70);
    let bytes_per = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(NiftiError::Datatype(other)),
    };
    let bitpix = h.i16(72);
    if bitpix as usize != bytes_per * 8 {
        return Err(NiftiError::Bitpix { datatype, bitpix });
    }
    let spacing = [h.f32(80), h.f32(84), h.f32(88)];
    let vox_offset = h.f32(108);
    if !(vox_offset >= DATA_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(NiftiError::VoxOffset(vox_offset));
    }
    let mut slope = h.f32(112);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if h.f32(116).is_finite() { h.f32(116) } else { 0.0 };

    let qform_code = h.i16(252);
    let sform_code = h.i16(254);
    let mut origin = [0.0f32; 3];
    if sform_code > 0 {
        for row in 0..3 {
            for col in 0..3 {
                let v = h.f32(280 + 16 * row + 4 * col);
                if row != col && v != 0.0 {
                    return Err(NiftiError::Rotation("srow"));
                }
                if row == col && !(v > 0.0) {
                    return Err(NiftiError::Rotation("srow"));
                }
            }
            origin[row] = h.f32(280 + 16 * row + 12);
        }
    } else if qform_code > 0 {
        let (b, c, d) = (h.f32(256), h.f32(260), h.f32(264));
        if b != 0.0 || c != 0.0 || d != 0.0 {
            return Err(NiftiError::Rotation("quaternion"));
        }
        if h.f32(76) < 0.0 {
            return Err(NiftiError::Rotation("qfac"));
        }
        origin = [h.f32(268), h.f32(272), h.f32(276)];
    }

    let geometry = Geometry::new(dims, spacing, origin)?;
    let n = geometry.voxel_count();
    let start = vox_offset as usize;
    let needed = start + n * bytes_per;
    if raw.len() < needed {
        return Err(NiftiError::Truncated {
            needed,
            available: raw.len(),
        });
    }
    let payload = &raw[start..needed];
    let description = String::from_utf8_lossy(&raw[148..228]).trim_end_matches('\0').to_string();

    let grid = match (datatype, names) {
        (DT_UINT8, Some(names)) => Grid::Mask(LabelMask::new(geometry, payload.iter().map(|&b| b as u16).collect(), names)?),
        (DT_INT16, Some(names)) => {
            let mut labels = Vec::with_capacity(n);
            for c in payload.chunks_exact(2) {
                let v = i16::from_le_bytes([c[0], c[1]]);
                if v < 0 {
                    return Err(NiftiError::NegativeLabel(v));
                }
                labels.push(v as u16);
            }
            Grid::Mask(LabelMask::new(geometry, labels, names)?)
        }
        _ => {
            let values: Vec<f32> = match datatype {
                DT_UINT8 => payload.iter().map(|&b| b as f32).collect(),
                DT_INT16 => payload
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
                    .collect(),
                _ => payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let scaled = if slope == 1.0 && inter == 0.0 {
                values
            } else {
                values.into_iter().map(|v| slope * v + inter).collect()
            };
            let (volume, clamped) = Volume::new_counting_clamps(geometry, scaled)?;
            return Ok(Loaded {
                grid: Grid::Volume(volume),
                report: LoadReport {
                    clamped_voxels: clamped,
                    datatype,
                    description,
                },
            });
        }
    };
    Ok(Loaded {
        grid,
        report: LoadReport {
            clamped_voxels: 0,
            datatype,
            description,
        },
    })
}

/// Extra header content for [`write_nifti_with`].
#[derive(Debug, Clone, Default)]
pub struct WriteOptions {
    /// Stored in the 80-byte `descrip` field (truncated).
    pub description: String,
}

/// Write a volume (float32) or label mask (uint8, or int16 above 255) plus its sidecar.
pub fn write_nifti<'a>(grid: impl Into<GridRef<'a>>, path: impl AsRef<Path>) -> Result<()> {
    write_nifti_with(grid, path, &WriteOptions::default())
}

pub fn write_nifti_with<'a>(grid: impl Into<GridRef<'a>>, path: impl AsRef<Path>, options: &WriteOptions) -> Result<()> {
    let path = path.as_ref();
    let grid = grid.into();
    let bytes = encode(grid, options)?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(w, Compression::default());
        enc.write_all(&bytes).map_err(io_err(path))?;
        enc.finish().and_then(|mut w| w.flush()).map_err(io_err(path))?;
    } else {
        w.write_all(&bytes).and_then(|_| w.flush()).map_err(io_err(path))?;
    }
    if let GridRef::Mask(mask) = grid {
        let sidecar = sidecar_path(path);
        let text = serde_json::to_string_pretty(mask.names()).expect("string map serializes");
        std::fs::write(&sidecar, text + "\n").map_err(io_err(&sidecar))?;
    }
    Ok(())
}

fn encode(grid: GridRef<'_>, options: &WriteOptions) -> Result<Vec<u8>> {
    let geometry = match grid {
        GridRef::Volume(v) => *v.geometry(),
        GridRef::Mask(m) => *m.geometry(),
    };
    let (datatype, payload): (i16, Vec<u8>) = match grid {
        GridRef::Volume(v) => (DT_FLOAT32, v.data().iter().flat_map(|x| x.to_le_bytes()).collect()),
        GridRef::Mask(m) => {
            let max = m.max_label();
            if max <= u8::MAX as u16 {
                (DT_UINT8, m.labels().iter().map(|&l| l as u8).collect())
            } else if max <= i16::MAX as u16 {
                (DT_INT16, m.labels().iter().flat_map(|&l| (l as i16).to_le_bytes()).collect())
            } else {
                return Err(NiftiError::LabelRange(max));
            }
        }
    };
    let bitpix: i16 = match datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        _ => 32,
    };

    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_i32 = |h: &mut Vec<u8>, at: usize, v: i32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());

    put_i32(&mut h, 0, HEADER_SIZE);
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for axis in 0..3 {
        let d = i16::try_from(geometry.dims[axis]).map_err(|_| NiftiError::DimValue {
            axis: axis + 1,
            value: i16::MAX,
        })?;
        put_i16(&mut h, 42 + 2 * axis, d);
    }
    for axis in 3..7 {
        put_i16(&mut h, 42 + 2 * axis, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0); // qfac
    for axis in 0..3 {
        put_f32(&mut h, 80 + 4 * axis, geometry.spacing[axis]);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // xyzt_units: mm
    let descrip = options.description.as_bytes();
    let n = descrip.len().min(79);
    h[148..148 + n].copy_from_slice(&descrip[..n]);
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for axis in 0..3 {
        put_f32(&mut h, 268 + 4 * axis, geometry.origin[axis]);
        put_f32(&mut h, 280 + 16 * axis + 4 * axis, geometry.spacing[axis]);
        put_f32(&mut h, 280 + 16 * axis + 12, geometry.origin[axis]);
    }
    h[344..348].copy_from_slice(MAGIC);
    h.extend_from_slice(&payload);
    Ok(h)
}
