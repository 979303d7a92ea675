//! On-disk phantom datasets: NIfTI files plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vbquant_core::phantom::{CohortCase, CohortSpec};
use vbquant_core::quantify::RegionSet;
use vbquant_core::trainer::Case;
use vbquant_core::volume::{read_nifti, write_nifti, LabelMask, Volume};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: String,
    pub volume: String,
    pub infection: String,
    pub regions: String,
    pub infection_voxels: usize,
    pub ggo_voxels: usize,
    pub consolidation_voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    pub cohort: CohortSpec,
    pub cases: Vec<ManifestCase>,
}

pub fn write_case(dir: &Path, c: &CohortCase) -> Result<ManifestCase> {
    let entry = ManifestCase {
        id: c.id.clone(),
        volume: format!("{}_ct.nii", c.id),
        infection: format!("{}_infection.nii", c.id),
        regions: format!("{}_regions.nii", c.id),
        infection_voxels: c.phantom.infection.foreground_count(),
        ggo_voxels: c.phantom.class_counts().0,
        consolidation_voxels: c.phantom.class_counts().1,
    };
    write_nifti(&c.phantom.volume, dir.join(&entry.volume))?;
    write_nifti(&c.phantom.infection, dir.join(&entry.infection))?;
    write_nifti(c.phantom.regions.segments(), dir.join(&entry.regions))?;
    Ok(entry)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    read_nifti(path)?
        .into_volume()
        .with_context(|| format!("{} holds a label mask, expected a CT volume", path.display()))
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let loaded = read_nifti(path)?;
    match loaded.grid {
        vbquant_core::volume::Grid::Mask(m) => Ok(m),
        vbquant_core::volume::Grid::Volume(_) => bail!(
            "{} is not a label mask (integer NIfTI with a .labels.json sidecar)",
            path.display()
        ),
    }
}

pub fn load_regions(path: &Path) -> Result<RegionSet> {
    let seg = load_mask(path)?;
    RegionSet::from_segments(seg).with_context(|| format!("malformed region map {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))?;
        if manifest.format != MANIFEST_FORMAT {
            bail!("unsupported manifest format {}", manifest.format);
        }
        if manifest.cases.is_empty() {
            bail!("manifest lists no cases");
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.manifest.cases.iter().map(|c| c.id.clone()).collect()
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestCase> {
        self.manifest
            .cases
            .iter()
            .find(|c| c.id == id)
            .with_context(|| format!("case {id} is not in the manifest"))
    }

    pub fn volume(&self, id: &str) -> Result<Volume> {
        load_volume(&self.dir.join(&self.entry(id)?.volume))
    }

    pub fn infection(&self, id: &str) -> Result<LabelMask> {
        load_mask(&self.dir.join(&self.entry(id)?.infection))
    }

    pub fn regions(&self, id: &str) -> Result<RegionSet> {
        load_regions(&self.dir.join(&self.entry(id)?.regions))
    }

    pub fn case(&self, id: &str) -> Result<Case> {
        Ok(Case::new(id, self.volume(id)?, self.infection(id)?))
    }
}
