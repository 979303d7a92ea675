use std::collections::BTreeMap;

use super::QuantError;
use crate::volume::{Geometry, LabelMask};

/// Lobe names; label `i + 1` in a lobe mask.
pub const LOBES: [&str; 5] = [
    "Left upper lobe",
    "Left lower lobe",
    "Right upper lobe",
    "Right middle lobe",
    "Right lower lobe",
];

/// `(lobe index, segment name)`; segment label `i + 1`.
pub const SEGMENTS: [(usize, &str); 18] = [
    (0, "posterior tip"),
    (0, "anterior"),
    (0, "upper tongue"),
    (0, "lower tongue"),
    (1, "dorsal"),
    (1, "anterior medial basal"),
    (1, "outer basal"),
    (1, "posterior basal"),
    (2, "apical"),
    (2, "back"),
    (2, "anterior"),
    (3, "lateral"),
    (3, "medial"),
    (4, "dorsal"),
    (4, "inner basal"),
    (4, "anterior basal"),
    (4, "outer basal"),
    (4, "posterior basal"),
];

pub const LUNG_NAME: &str = "Whole lung";

/// Full display name of segment `i` (0-based), e.g. `Right lower lobe / posterior basal`.
pub fn segment_name(i: usize) -> String {
    let (lobe, name) = SEGMENTS[i];
    format!("{} / {}", LOBES[lobe], name)
}

pub fn lobe_names() -> BTreeMap<u16, String> {
    LOBES.iter().enumerate().map(|(i, n)| (i as u16 + 1, n.to_string())).collect()
}

pub fn segment_names() -> BTreeMap<u16, String> {
    (0..SEGMENTS.len()).map(|i| (i as u16 + 1, segment_name(i))).collect()
}

/// Lung, lobe and segment masks on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    lung: LabelMask,
    lobes: LabelMask,
    segments: LabelMask,
}

impl RegionSet {
    /// Check the refinement chain segment ⊂ lobe ⊂ lung.
    pub fn new(lung: LabelMask, lobes: LabelMask, segments: LabelMask) -> Result<Self, QuantError> {
        lung.geometry().ensure_same(lobes.geometry())?;
        lung.geometry().ensure_same(segments.geometry())?;
        if lobes.max_label() as usize > LOBES.len() {
            return Err(QuantError::Regions(format!("lobe label {} out of range", lobes.max_label())));
        }
        if segments.max_label() as usize > SEGMENTS.len() {
            return Err(QuantError::Regions(format!("segment label {} out of range", segments.max_label())));
        }
        let l = lung.labels();
        let lo = lobes.labels();
        let s = segments.labels();
        for i in 0..l.len() {
            if lo[i] != 0 && l[i] == 0 {
                return Err(QuantError::Regions(format!("lobe voxel {i} outside lung")));
            }
            if s[i] != 0 && SEGMENTS[s[i] as usize - 1].0 + 1 != lo[i] as usize {
                return Err(QuantError::Regions(format!(
                    "segment {} voxel {i} not inside its lobe",
                    s[i]
                )));
            }
        }
        Ok(Self { lung, lobes, segments })
    }

    /// Derive lobes and lung from an 18-label segment map.
    pub fn from_segments(segments: LabelMask) -> Result<Self, QuantError> {
        let geometry = *segments.geometry();
        if segments.max_label() as usize > SEGMENTS.len() {
            return Err(QuantError::Regions(format!("segment label {} out of range", segments.max_label())));
        }
        let lobe_labels: Vec<u16> = segments
            .labels()
            .iter()
            .map(|&s| if s == 0 { 0 } else { SEGMENTS[s as usize - 1].0 as u16 + 1 })
            .collect();
        let lung = LabelMask::binary(geometry, &segments.foreground(), LUNG_NAME)?;
        let lobes = LabelMask::new(geometry, lobe_labels, lobe_names())?;
        let segments = LabelMask::new(geometry, segments.labels().to_vec(), segment_names())?;
        Self::new(lung, lobes, segments)
    }

    pub fn geometry(&self) -> &Geometry {
        self.lung.geometry()
    }

    pub fn lung(&self) -> &LabelMask {
        &self.lung
    }

    pub fn lobes(&self) -> &LabelMask {
        &self.lobes
    }

    pub fn segments(&self) -> &LabelMask {
        &self.segments
    }
}
