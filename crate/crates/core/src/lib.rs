//! Volumetric infection segmentation and quantification for chest CT.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`volume`]: NIfTI-1 volume and label-mask I/O plus HU windowing.
//! - [`tensor`]: dense tensors and reverse-mode autodiff for 3-D convolutions.
//! - [`vbnet`]: the V-shaped encoder/decoder with bottleneck blocks.
//! - [`trainer`]: patch-based soft-Dice training and evaluation.
//! - [`quantify`]: Dice, infection volume, POI, HU histograms, statistics.
//! - [`phantom`]: deterministic synthetic CT phantoms and a simulated corrector.

pub mod phantom;
pub mod quantify;
pub mod tensor;
pub mod trainer;
pub mod vbnet;
pub mod volume;
