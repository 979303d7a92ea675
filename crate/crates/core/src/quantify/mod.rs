//! Segmentation metrics and infection quantification.
//!
//! Binary masks are read through [`LabelMask::foreground`]: any nonzero label
//! counts as inside. All counts are exact integer voxel counts.

mod regions;
mod report;
mod stats;

pub use regions::{lobe_names, segment_name, segment_names, RegionSet, LOBES, LUNG_NAME, SEGMENTS};
pub use report::{
    aggregate, compare_masks, longitudinal_report, quantify, write_aggregate_csv, AggregateRow, EvaluationRow,
    LongitudinalDelta, LongitudinalEntry, QuantOptions, QuantReport, RegionError, Timeline, REPORT_SCHEMA_VERSION,
};
pub use stats::{pearson, quantile_sorted, summary_stats, SummaryStats};

use serde::{Deserialize, Serialize};

use crate::volume::{Geometry, LabelMask, Volume, VolumeError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QuantError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("POI undefined: region {0} is empty")]
    EmptyRegion(String),
    #[error("histogram needs at least 2 strictly increasing edges")]
    BadEdges,
    #[error("invalid HU range ({lo}, {hi}]: lo must be below hi")]
    BadRange { lo: f32, hi: f32 },
    #[error("HU ranges ({0}, {1}] and ({2}, {3}] overlap")]
    OverlappingRanges(f32, f32, f32, f32),
    #[error("lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooFewValues { need: usize, got: usize },
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("dates must be strictly increasing ({0} then {1})")]
    UnsortedDates(String, String),
    #[error("invalid regions: {0}")]
    Regions(String),
}

fn overlap(a: &LabelMask, b: &LabelMask) -> Result<(usize, usize, usize), QuantError> {
    a.geometry().ensure_same(b.geometry())?;
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    Ok((na, nb, both))
}

/// `2|R ∩ S| / (|R| + |S|)`; two empty masks score 1.
pub fn dice(r: &LabelMask, s: &LabelMask) -> Result<f64, QuantError> {
    let (nr, ns, both) = overlap(r, s)?;
    Ok(dice_from_counts(nr, ns, both))
}

pub fn dice_from_counts(nr: usize, ns: usize, both: usize) -> f64 {
    if nr + ns == 0 {
        1.0
    } else {
        (2 * both) as f64 / (nr + ns) as f64
    }
}

/// Voxel volume in mm³ using the shortest decimal form of each spacing.
pub fn voxel_volume_mm3(geometry: &Geometry) -> f64 {
    geometry
        .spacing
        .iter()
        .map(|s| s.to_string().parse::<f64>().expect("finite spacing"))
        .product()
}

/// `count · sx·sy·sz / 1000`.
pub fn voxels_to_cm3(count: usize, geometry: &Geometry) -> f64 {
    count as f64 * voxel_volume_mm3(geometry) / 1000.0
}

/// Foreground volume in cm³.
pub fn infection_volume(mask: &LabelMask) -> f64 {
    voxels_to_cm3(mask.foreground_count(), mask.geometry())
}

/// `100 · |infection ∩ region| / |region|`.
pub fn poi(infection: &LabelMask, region: &LabelMask) -> Result<f64, QuantError> {
    let (_, nr, both) = overlap(infection, region)?;
    poi_from_counts(both, nr, region.names().get(&1).map_or("region", |s| s))
}

pub fn poi_from_counts(infected: usize, region: usize, name: &str) -> Result<f64, QuantError> {
    if region == 0 {
        return Err(QuantError::EmptyRegion(name.to_string()));
    }
    Ok(100.0 * infected as f64 / region as f64)
}

/// POI of one named region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPoi {
    pub name: String,
    pub poi: f64,
    pub infected: bool,
    pub infected_voxels: usize,
    pub region_voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiBreakdown {
    pub lung: RegionPoi,
    pub lobes: Vec<RegionPoi>,
    pub segments: Vec<RegionPoi>,
}

impl PoiBreakdown {
    /// Whole lung, then lobes, then segments.
    pub fn all(&self) -> impl Iterator<Item = &RegionPoi> {
        std::iter::once(&self.lung).chain(&self.lobes).chain(&self.segments)
    }
}

/// POI for the lung, each lobe and each segment.
pub fn poi_breakdown(infection: &LabelMask, regions: &RegionSet) -> Result<PoiBreakdown, QuantError> {
    infection.geometry().ensure_same(regions.geometry())?;
    let mut lobe_n = [0usize; 5];
    let mut lobe_i = [0usize; 5];
    let mut seg_n = [0usize; 18];
    let mut seg_i = [0usize; 18];
    let (mut lung_n, mut lung_i) = (0, 0);
    let inf = infection.labels();
    let lung = regions.lung().labels();
    let lobes = regions.lobes().labels();
    let segs = regions.segments().labels();
    for v in 0..inf.len() {
        let hit = (inf[v] != 0) as usize;
        if lung[v] != 0 {
            lung_n += 1;
            lung_i += hit;
        }
        if lobes[v] != 0 {
            lobe_n[lobes[v] as usize - 1] += 1;
            lobe_i[lobes[v] as usize - 1] += hit;
        }
        if segs[v] != 0 {
            seg_n[segs[v] as usize - 1] += 1;
            seg_i[segs[v] as usize - 1] += hit;
        }
    }
    let make = |name: String, i: usize, n: usize| -> Result<RegionPoi, QuantError> {
        Ok(RegionPoi {
            poi: poi_from_counts(i, n, &name)?,
            name,
            infected: i > 0,
            infected_voxels: i,
            region_voxels: n,
        })
    };
    Ok(PoiBreakdown {
        lung: make(LUNG_NAME.to_string(), lung_i, lung_n)?,
        lobes: (0..5).map(|k| make(LOBES[k].to_string(), lobe_i[k], lobe_n[k])).collect::<Result<_, _>>()?,
        segments: (0..18)
            .map(|k| make(segment_name(k), seg_i[k], seg_n[k]))
            .collect::<Result<_, _>>()?,
    })
}

/// Counts in left-closed bins `[e_i, e_{i+1})` plus out-of-range tallies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f32>,
    pub counts: Vec<usize>,
    /// Values below the first edge.
    pub underflow: usize,
    /// Values at or above the last edge.
    pub overflow: usize,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }
}

/// Histogram of HU values inside `mask`.
pub fn hu_histogram(volume: &Volume, mask: &LabelMask, edges: &[f32]) -> Result<Histogram, QuantError> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(QuantError::BadEdges);
    }
    volume.geometry().ensure_same(mask.geometry())?;
    let mut h = Histogram {
        edges: edges.to_vec(),
        counts: vec![0; edges.len() - 1],
        underflow: 0,
        overflow: 0,
    };
    let last = edges[edges.len() - 1];
    for (&hu, &l) in volume.data().iter().zip(mask.labels()) {
        if l == 0 {
            continue;
        }
        if hu < edges[0] {
            h.underflow += 1;
        } else if hu >= last {
            h.overflow += 1;
        } else {
            // first edge strictly greater than hu, minus one
            let bin = edges.partition_point(|&e| e <= hu) - 1;
            h.counts[bin] += 1;
        }
    }
    Ok(h)
}

/// Default histogram edges: −1000 to +100 HU in 50 HU steps.
pub fn default_histogram_edges() -> Vec<f32> {
    (0..=22).map(|i| -1000.0 + 50.0 * i as f32).collect()
}

/// Half-open HU interval `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f32, f32)", into = "(f32, f32)")]
pub struct HuRange {
    lo: f32,
    hi: f32,
}

impl HuRange {
    pub const DEFAULT_GGO: HuRange = HuRange { lo: -750.0, hi: -300.0 };
    pub const DEFAULT_CONSOLIDATION: HuRange = HuRange { lo: -300.0, hi: 50.0 };

    pub fn new(lo: f32, hi: f32) -> Result<Self, QuantError> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(QuantError::BadRange { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f32 {
        self.lo
    }

    pub fn hi(&self) -> f32 {
        self.hi
    }

    pub fn contains(&self, hu: f32) -> bool {
        hu > self.lo && hu <= self.hi
    }

    pub fn overlaps(&self, other: &HuRange) -> bool {
        self.lo < other.hi && other.lo < self.hi
    }
}

impl TryFrom<(f32, f32)> for HuRange {
    type Error = QuantError;

    fn try_from((lo, hi): (f32, f32)) -> Result<Self, QuantError> {
        Self::new(lo, hi)
    }
}

impl From<HuRange> for (f32, f32) {
    fn from(r: HuRange) -> Self {
        (r.lo, r.hi)
    }
}

impl std::str::FromStr for HuRange {
    type Err = String;

    /// Parses `lo,hi` or `lo:hi`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s
            .split_once(',')
            .or_else(|| s.split_once(':'))
            .ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
        let lo: f32 = a.trim().parse().map_err(|e| format!("bad lower bound {a:?}: {e}"))?;
        let hi: f32 = b.trim().parse().map_err(|e| format!("bad upper bound {b:?}: {e}"))?;
        Self::new(lo, hi).map_err(|e| e.to_string())
    }
}

/// Infected voxels partitioned into GGO, consolidation and other.
#[derive(Debug, Clone, PartialEq)]
pub struct OpacitySplit {
    pub ggo: LabelMask,
    pub consolidation: LabelMask,
    pub ggo_voxels: usize,
    pub consolidation_voxels: usize,
    pub other_voxels: usize,
}

impl OpacitySplit {
    pub fn infected_voxels(&self) -> usize {
        self.ggo_voxels + self.consolidation_voxels + self.other_voxels
    }

    /// GGO share of the infection, in percent (0 for an empty infection).
    pub fn ggo_percent(&self) -> f64 {
        percent(self.ggo_voxels, self.infected_voxels())
    }

    pub fn consolidation_percent(&self) -> f64 {
        percent(self.consolidation_voxels, self.infected_voxels())
    }
}

fn percent(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        100.0 * a as f64 / b as f64
    }
}

pub fn ggo_consolidation_split(
    volume: &Volume,
    infection: &LabelMask,
    ggo: HuRange,
    consolidation: HuRange,
) -> Result<OpacitySplit, QuantError> {
    if ggo.overlaps(&consolidation) {
        return Err(QuantError::OverlappingRanges(ggo.lo, ggo.hi, consolidation.lo, consolidation.hi));
    }
    volume.geometry().ensure_same(infection.geometry())?;
    let n = volume.data().len();
    let mut g = vec![false; n];
    let mut c = vec![false; n];
    let (mut ng, mut nc, mut no) = (0, 0, 0);
    for (i, (&hu, &l)) in volume.data().iter().zip(infection.labels()).enumerate() {
        if l == 0 {
            continue;
        }
        if ggo.contains(hu) {
            g[i] = true;
            ng += 1;
        } else if consolidation.contains(hu) {
            c[i] = true;
            nc += 1;
        } else {
            no += 1;
        }
    }
    let geometry = *volume.geometry();
    Ok(OpacitySplit {
        ggo: LabelMask::binary(geometry, &g, "ggo")?,
        consolidation: LabelMask::binary(geometry, &c, "consolidation")?,
        ggo_voxels: ng,
        consolidation_voxels: nc,
        other_voxels: no,
    })
}
