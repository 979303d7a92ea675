//! Synthetic chest CT phantoms with exact ground truth, and a simulated
//! annotator that corrects model proposals.
//!
//! Each lung is an ellipsoid. Lobes and segments are cut by planes in the
//! ellipsoid's normalised coordinates, so every lung voxel belongs to exactly
//! one segment. Lesions are ellipsoids that must lie fully inside a lung.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::quantify::{segment_names, HuRange, QuantError, RegionSet, SEGMENTS};
use crate::volume::{Geometry, LabelMask, Volume, VolumeError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PhantomError {
    #[error("lesion {0} extends outside the lungs")]
    LesionOutsideLung(usize),
    #[error("lesion {0} covers no voxel")]
    EmptyLesion(usize),
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Axis-aligned ellipsoid in voxel coordinates `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalised offset of voxel `p`; inside iff its squared norm is ≤ 1.
    pub fn normalized(&self, p: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] as f64 - self.center[a]) / self.radii[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        self.normalized(p).iter().map(|u| u * u).sum::<f64>() <= 1.0
    }

    /// Inclusive voxel bounding box clipped to `dims`, or `None` if empty.
    fn bounds(&self, dims: [usize; 3]) -> Option<[(usize, usize); 3]> {
        let mut out = [(0, 0); 3];
        for a in 0..3 {
            let lo = (self.center[a] - self.radii[a]).ceil().max(0.0);
            let hi = (self.center[a] + self.radii[a]).floor().min(dims[a] as f64 - 1.0);
            if lo > hi {
                return None;
            }
            out[a] = (lo as usize, hi as usize);
        }
        Some(out)
    }

    /// Every voxel inside the ellipsoid (clipped to the grid), `x` fastest.
    pub fn voxels(&self, dims: [usize; 3]) -> Vec<[usize; 3]> {
        let Some([(x0, x1), (y0, y1), (z0, z1)]) = self.bounds(dims) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if self.contains([x, y, z]) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    /// True if the ellipsoid reaches past the grid.
    fn clipped(&self, dims: [usize; 3]) -> bool {
        (0..3).any(|a| self.center[a] - self.radii[a] < 0.0 || self.center[a] + self.radii[a] > dims[a] as f64 - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionClass {
    Ggo,
    Consolidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub shape: Ellipsoid,
    pub class: LesionClass,
    pub hu_mean: f32,
    pub hu_sd: f32,
}

/// Everything needed to render one phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub seed: u64,
    /// `[left, right]`; the left lung sits at larger `x`.
    pub lungs: [Ellipsoid; 2],
    pub lesions: Vec<Lesion>,
    pub air_hu: f32,
    pub tissue_hu: f32,
    pub noise_sd: f32,
    pub ggo_range: HuRange,
    pub consolidation_range: HuRange,
}

pub const GGO_MEAN_HU: f32 = -550.0;
pub const CONSOLIDATION_MEAN_HU: f32 = -100.0;
pub const LESION_SD_HU: f32 = 30.0;

impl PhantomSpec {
    /// Two lungs filling most of the grid, no lesions.
    pub fn new(dims: [usize; 3], spacing: [f32; 3], seed: u64) -> Self {
        let d = dims.map(|n| n as f64);
        let lung = |cx: f64| Ellipsoid {
            center: [cx * (d[0] - 1.0), 0.5 * (d[1] - 1.0), 0.5 * (d[2] - 1.0)],
            radii: [0.19 * d[0], 0.36 * d[1], 0.42 * d[2]],
        };
        Self {
            dims,
            spacing,
            seed,
            lungs: [lung(0.72), lung(0.28)],
            lesions: Vec::new(),
            air_hu: -1000.0,
            tissue_hu: 40.0,
            noise_sd: 30.0,
            ggo_range: HuRange::DEFAULT_GGO,
            consolidation_range: HuRange::DEFAULT_CONSOLIDATION,
        }
    }

    pub fn geometry(&self) -> Result<Geometry, PhantomError> {
        Ok(Geometry::new(self.dims, self.spacing, [0.0; 3])?)
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if !(self.noise_sd >= 0.0) {
            return Err(PhantomError::Spec("noise_sd must be >= 0".into()));
        }
        for l in &self.lungs {
            if l.radii.iter().any(|&r| !(r > 0.0)) {
                return Err(PhantomError::Spec("lung radii must be positive".into()));
            }
            if l.clipped(self.dims) {
                return Err(PhantomError::Spec("lung ellipsoid extends past the grid".into()));
            }
        }
        if self.ggo_range.overlaps(&self.consolidation_range) {
            return Err(PhantomError::Spec("GGO and consolidation ranges overlap".into()));
        }
        for (i, l) in self.lesions.iter().enumerate() {
            if l.shape.radii.iter().any(|&r| !(r > 0.0)) || !(l.hu_sd >= 0.0) {
                return Err(PhantomError::Spec(format!("lesion {i} has invalid radii or sd")));
            }
        }
        Ok(())
    }

    pub fn range_of(&self, class: LesionClass) -> HuRange {
        match class {
            LesionClass::Ggo => self.ggo_range,
            LesionClass::Consolidation => self.consolidation_range,
        }
    }
}

/// Segment index (0-based) of a voxel at normalised offset `u` in a lung.
/// `lateral` is the sign of `x` pointing away from the body midline.
fn segment_of(left: bool, u: [f64; 3], lateral: f64) -> usize {
    let (ulat, uy, uz) = (u[0] * lateral, u[1], u[2]);
    let oblique = uz - 0.4 * uy;
    if left {
        if oblique > -0.1 {
            // left upper lobe
            if uz > 0.3 {
                if uy > 0.0 {
                    0
                } else {
                    1
                }
            } else if uz > -0.2 {
                2
            } else {
                3
            }
        } else if uz > -0.25 {
            4
        } else if uy > 0.3 {
            7
        } else if ulat < 0.0 {
            5
        } else {
            6
        }
    } else if oblique > -0.1 {
        if uz > 0.3 {
            // right upper lobe
            if uz > 0.65 {
                8
            } else if uy > 0.0 {
                9
            } else {
                10
            }
        } else if ulat > 0.0 {
            11
        } else {
            12
        }
    } else if uz > -0.25 {
        13
    } else if uy > 0.3 {
        17
    } else if ulat < -0.3 {
        14
    } else if uy < -0.2 {
        15
    } else {
        16
    }
}

/// 18-label segment map of the two lungs (0 outside).
pub fn segment_map(spec: &PhantomSpec) -> Result<LabelMask, PhantomError> {
    let g = spec.geometry()?;
    let mut labels = vec![0u16; g.voxel_count()];
    for (k, lung) in spec.lungs.iter().enumerate() {
        let left = k == 0;
        let lateral = if lung.center[0] >= 0.5 * (spec.dims[0] as f64 - 1.0) { 1.0 } else { -1.0 };
        for p in lung.voxels(spec.dims) {
            let i = g.index(p[0], p[1], p[2]);
            if labels[i] == 0 {
                labels[i] = segment_of(left, lung.normalized(p), lateral) as u16 + 1;
            }
        }
    }
    Ok(LabelMask::new(g, labels, segment_names())?)
}

/// A rendered phantom with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub infection: LabelMask,
    pub regions: RegionSet,
    /// Lesion class per voxel: 1 GGO, 2 consolidation.
    pub lesion_classes: LabelMask,
}

impl Phantom {
    pub fn class_counts(&self) -> (usize, usize) {
        (self.lesion_classes.count(1), self.lesion_classes.count(2))
    }
}

pub fn gen_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    let g = spec.geometry()?;
    let segments = segment_map(spec)?;
    let n = g.voxel_count();
    let mut class = vec![0u8; n];
    let mut lesion_of = vec![usize::MAX; n];
    for (li, lesion) in spec.lesions.iter().enumerate() {
        if lesion.shape.clipped(spec.dims) {
            return Err(PhantomError::LesionOutsideLung(li));
        }
        let vox = lesion.shape.voxels(spec.dims);
        if vox.is_empty() {
            return Err(PhantomError::EmptyLesion(li));
        }
        for p in vox {
            let i = g.index(p[0], p[1], p[2]);
            if segments.labels()[i] == 0 {
                return Err(PhantomError::LesionOutsideLung(li));
            }
            class[i] = match lesion.class {
                LesionClass::Ggo => 1,
                LesionClass::Consolidation => 2,
            };
            lesion_of[i] = li;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f32, spec.noise_sd).expect("sd >= 0");
    let unit = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut hu = Vec::with_capacity(n);
    for i in 0..n {
        let v = if let Some(lesion) = spec.lesions.get(lesion_of[i]) {
            let r = spec.range_of(lesion.class);
            let raw = lesion.hu_mean + lesion.hu_sd * unit.sample(&mut rng);
            // keep strictly inside (lo, hi]
            raw.clamp(r.lo() + 0.5, r.hi())
        } else if segments.labels()[i] != 0 {
            spec.air_hu + noise.sample(&mut rng)
        } else {
            spec.tissue_hu + noise.sample(&mut rng)
        };
        hu.push(v);
    }
    let fg: Vec<bool> = class.iter().map(|&c| c != 0).collect();
    Ok(Phantom {
        volume: Volume::new(g, hu)?,
        infection: LabelMask::binary(g, &fg, crate::vbnet::INFECTION_LABEL)?,
        regions: RegionSet::from_segments(segments)?,
        lesion_classes: LabelMask::new(
            g,
            class.iter().map(|&c| c as u16).collect(),
            BTreeMap::from([(1, "ggo".to_string()), (2, "consolidation".to_string())]),
        )?,
    })
}

/// Generator settings for a cohort of phantoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub noise_sd: f32,
    /// Inclusive range of lesion counts per case.
    pub lesions: (usize, usize),
    /// Range of lesion radii as a fraction of the smallest grid dimension.
    pub radius_fraction: (f64, f64),
    /// Probability that a lesion is GGO rather than consolidation.
    pub ggo_probability: f64,
    /// Relative weight of lower-lobe lesion placement (1 = uniform).
    pub lower_lobe_weight: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            dims: [64; 3],
            spacing: [1.0; 3],
            noise_sd: 30.0,
            lesions: (1, 4),
            radius_fraction: (0.05, 0.12),
            ggo_probability: 0.6,
            lower_lobe_weight: 1.0,
        }
    }
}

impl CohortSpec {
    fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::Spec(m.to_string()));
        if self.lesions.0 > self.lesions.1 {
            return bad("lesion count range is reversed");
        }
        let (a, b) = self.radius_fraction;
        if !(a > 0.0 && a <= b && b < 0.5) {
            return bad("radius_fraction must satisfy 0 < lo <= hi < 0.5");
        }
        if !(0.0..=1.0).contains(&self.ggo_probability) {
            return bad("ggo_probability must lie in [0, 1]");
        }
        if !(self.lower_lobe_weight > 0.0) {
            return bad("lower_lobe_weight must be positive");
        }
        Ok(())
    }
}

const LOWER_LOBES: [usize; 2] = [1, 4];
const PLACEMENT_ATTEMPTS: usize = 200;

/// Random lesions fully inside the lungs of `base`.
fn draw_lesions<R: Rng>(base: &PhantomSpec, cohort: &CohortSpec, rng: &mut R) -> Result<Vec<Lesion>, PhantomError> {
    let segments = segment_map(base)?;
    let g = segments.geometry();
    let lung_voxels: Vec<usize> = (0..g.voxel_count()).filter(|&i| segments.labels()[i] != 0).collect();
    let count = rng.gen_range(cohort.lesions.0..=cohort.lesions.1);
    let dmin = *cohort.dims.iter().min().expect("3 dims") as f64;
    let wmax = cohort.lower_lobe_weight.max(1.0);
    let mut out = Vec::with_capacity(count);
    for li in 0..count {
        let class = if rng.gen_bool(cohort.ggo_probability) {
            LesionClass::Ggo
        } else {
            LesionClass::Consolidation
        };
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let i = lung_voxels[rng.gen_range(0..lung_voxels.len())];
            let lobe = SEGMENTS[segments.labels()[i] as usize - 1].0;
            let w = if LOWER_LOBES.contains(&lobe) { cohort.lower_lobe_weight } else { 1.0 };
            if !rng.gen_bool(w / wmax) {
                continue;
            }
            let c = g.coords(i);
            let radii: [f64; 3] = std::array::from_fn(|_| {
                dmin * rng.gen_range(cohort.radius_fraction.0..=cohort.radius_fraction.1)
            });
            let shape = Ellipsoid {
                center: c.map(|v| v as f64),
                radii,
            };
            if !shape.clipped(cohort.dims)
                && shape
                    .voxels(cohort.dims)
                    .iter()
                    .all(|p| segments.labels()[g.index(p[0], p[1], p[2])] != 0)
            {
                placed = Some(shape);
                break;
            }
        }
        let shape = placed.ok_or_else(|| PhantomError::Spec(format!("could not place lesion {li} inside the lungs")))?;
        let hu_mean = match class {
            LesionClass::Ggo => GGO_MEAN_HU,
            LesionClass::Consolidation => CONSOLIDATION_MEAN_HU,
        };
        out.push(Lesion {
            shape,
            class,
            hu_mean,
            hu_sd: LESION_SD_HU,
        });
    }
    Ok(out)
}

/// One generated cohort member.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortCase {
    pub id: String,
    pub spec: PhantomSpec,
    pub phantom: Phantom,
}

/// Spec of case `index` in a cohort drawn with `seed`.
pub fn cohort_spec(cohort: &CohortSpec, seed: u64, index: usize) -> Result<PhantomSpec, PhantomError> {
    cohort.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let mut spec = PhantomSpec::new(cohort.dims, cohort.spacing, rng.gen());
    spec.noise_sd = cohort.noise_sd;
    spec.lesions = draw_lesions(&spec, cohort, &mut rng)?;
    Ok(spec)
}

/// `n` phantoms with varying lesion burden; case `i` depends only on `(seed, i)`.
pub fn gen_cohort(n: usize, cohort: &CohortSpec, seed: u64) -> Result<Vec<CohortCase>, PhantomError> {
    if n == 0 {
        return Err(PhantomError::Spec("cohort size must be >= 1".into()));
    }
    (0..n)
        .map(|i| {
            let spec = cohort_spec(cohort, seed, i)?;
            Ok(CohortCase {
                id: format!("case_{i:03}"),
                phantom: gen_phantom(&spec)?,
                spec,
            })
        })
        .collect()
}

/// A simulated annotator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectorModel {
    /// Radius of a random dilation or erosion of the truth.
    pub error_radius: usize,
    /// Probability of flipping each voxel on the mask boundary.
    pub flip_probability: f64,
    pub seconds_per_voxel: f64,
}

impl Default for CorrectorModel {
    fn default() -> Self {
        Self {
            error_radius: 0,
            flip_probability: 0.0,
            seconds_per_voxel: 0.01,
        }
    }
}

impl CorrectorModel {
    pub fn zero_noise() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(0.0..=1.0).contains(&self.flip_probability) || !(self.seconds_per_voxel >= 0.0) {
            return Err(PhantomError::Spec("corrector parameters out of range".into()));
        }
        Ok(())
    }
}

/// One 6-connected dilation (`grow`) or erosion step.
fn morph_step(g: &Geometry, m: &[bool], grow: bool) -> Vec<bool> {
    let [nx, ny, nz] = g.dims;
    let mut out = m.to_vec();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = g.index(x, y, z);
                if m[i] == grow {
                    continue;
                }
                let nb = [
                    (x > 0).then(|| i - 1),
                    (x + 1 < nx).then(|| i + 1),
                    (y > 0).then(|| i - nx),
                    (y + 1 < ny).then(|| i + nx),
                    (z > 0).then(|| i - nx * ny),
                    (z + 1 < nz).then(|| i + nx * ny),
                ];
                // erosion treats out-of-grid as background
                let hit = if grow {
                    nb.iter().flatten().any(|&j| m[j])
                } else {
                    nb.iter().any(|j| j.map_or(true, |j| !m[j]))
                };
                if hit {
                    out[i] = grow;
                }
            }
        }
    }
    out
}

/// Voxels with a 6-neighbour of the opposite value.
pub fn boundary(g: &Geometry, m: &[bool]) -> Vec<bool> {
    let grown = morph_step(g, m, true);
    let shrunk = morph_step(g, m, false);
    grown.iter().zip(&shrunk).map(|(&a, &b)| a != b).collect()
}

/// Symmetric difference size.
pub fn edit_cost(a: &LabelMask, b: &LabelMask) -> Result<usize, VolumeError> {
    a.geometry().ensure_same(b.geometry())?;
    Ok(a
        .labels()
        .iter()
        .zip(b.labels())
        .filter(|(&x, &y)| (x != 0) != (y != 0))
        .count())
}

/// The annotator's corrected mask (truth perturbed by corrector noise) and the
/// seconds spent, `seconds_per_voxel · |proposal Δ corrected|`.
pub fn simulate_correction(
    proposal: &LabelMask,
    truth: &LabelMask,
    corrector: &CorrectorModel,
    seed: u64,
) -> Result<(LabelMask, f64), PhantomError> {
    corrector.validate()?;
    let g = *truth.geometry();
    g.ensure_same(proposal.geometry())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = truth.foreground();
    if corrector.error_radius > 0 {
        let grow = rng.gen_bool(0.5);
        for _ in 0..corrector.error_radius {
            m = morph_step(&g, &m, grow);
        }
    }
    if corrector.flip_probability > 0.0 {
        let band = boundary(&g, &m);
        for (v, b) in m.iter_mut().zip(band) {
            if b && rng.gen_bool(corrector.flip_probability) {
                *v = !*v;
            }
        }
    }
    let corrected = LabelMask::binary(g, &m, crate::vbnet::INFECTION_LABEL)?;
    let seconds = corrector.seconds_per_voxel * edit_cost(proposal, &corrected)? as f64;
    Ok((corrected, seconds))
}
