//! VB-Net: a V-shaped 3-D encoder/decoder whose convolution stages are
//! bottleneck blocks (1×1×1 reduce, 3×3×3, 1×1×1 restore, residual add).
//!
//! The contracting path applies the blocks of each level and then a
//! stride-2 2×2×2 convolution. The expansive path mirrors it with stride-2
//! transposed convolutions, concatenating the matching encoder features
//! before each level's blocks. A 1×1×1 convolution and a sigmoid produce one
//! foreground probability per voxel.

mod checkpoint;
pub mod network;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, FORMAT_VERSION};
pub use network::{param_specs, Ablation, Backend, EagerBackend, GraphBackend, Init, ParamSpec};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{FlushDenormals, Graph, Scalar, Tensor, TensorError, Var};
use crate::volume::{lung_window, LabelMask, Volume};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input spatial dims {dims:?} not divisible by {factor}")]
    IndivisibleDims { dims: [usize; 3], factor: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("threshold {0} outside [0, 1)")]
    BadThreshold(f32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Convolution stage used at every level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// 1×1×1 → 3×3×3 → 1×1×1 with a reduced middle width.
    #[default]
    Bottleneck,
    /// A single C→C 3×3×3 convolution; the comparison baseline.
    Plain,
}

/// One bottleneck block's widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub channels: usize,
    pub reduced: usize,
    pub residual: bool,
}

impl BottleneckSpec {
    pub const KERNELS: [usize; 3] = [1, 3, 1];

    pub fn new(channels: usize, reduced: usize, residual: bool) -> Result<Self, ModelError> {
        if reduced == 0 || reduced > channels {
            return Err(ModelError::InvalidConfig(format!(
                "bottleneck width {reduced} outside 1..={channels}"
            )));
        }
        Ok(Self {
            channels,
            reduced,
            residual,
        })
    }

    /// Weight count (no biases or activations): `C·r + 27·r² + r·C`.
    pub fn weight_count(&self) -> usize {
        let (c, r) = (self.channels, self.reduced);
        c * r + 27 * r * r + r * c
    }

    /// Weight count of the plain C→C 3×3×3 replacement: `27·C²`.
    pub fn plain_weight_count(&self) -> usize {
        27 * self.channels * self.channels
    }
}

/// Per-block weight counts `(bottleneck, plain)` for `C` channels reduced to `r`.
pub fn compare_plain_block(channels: usize, reduced: usize) -> Result<(usize, usize), ModelError> {
    let spec = BottleneckSpec::new(channels, reduced, true)?;
    Ok((spec.weight_count(), spec.plain_weight_count()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VbNetConfig {
    pub levels: usize,
    pub channels_per_level: Vec<usize>,
    pub blocks_per_level: Vec<usize>,
    /// `C / r` for every bottleneck block.
    pub bottleneck_ratio: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default)]
    pub block_kind: BlockKind,
}

fn default_true() -> bool {
    true
}

impl Default for VbNetConfig {
    /// Three levels with 16/32/64 channels, one block per level, ratio 4.
    fn default() -> Self {
        Self {
            levels: 3,
            channels_per_level: vec![16, 32, 64],
            blocks_per_level: vec![1, 1, 1],
            bottleneck_ratio: 4,
            input_channels: 1,
            output_channels: 1,
            residual: true,
            block_kind: BlockKind::Bottleneck,
        }
    }
}

impl VbNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.levels < 2 {
            return bad(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.channels_per_level.len() != self.levels || self.blocks_per_level.len() != self.levels {
            return bad("channels_per_level and blocks_per_level need one entry per level".into());
        }
        if self.channels_per_level.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.channels_per_level.windows(2).any(|w| w[1] < w[0]) {
            return bad("channels must be non-decreasing down the contracting path".into());
        }
        if self.bottleneck_ratio == 0 {
            return bad("bottleneck_ratio must be >= 1".into());
        }
        if self.input_channels != 1 || self.output_channels != 1 {
            return bad("exactly one input and one output channel are supported".into());
        }
        Ok(())
    }

    /// Middle width of a bottleneck block with `channels` channels.
    pub fn reduced(&self, channels: usize) -> usize {
        (channels / self.bottleneck_ratio).max(1)
    }

    /// Spatial dims must be multiples of this.
    pub fn size_factor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Network parameters plus their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: VbNetConfig,
    params: BTreeMap<String, Tensor<f32>>,
    /// Optimizer steps applied so far.
    pub trained_iterations: u64,
}

/// Build a freshly initialised model (He-uniform weights, zero biases).
pub fn build_vbnet(config: &VbNetConfig, seed: u64) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for spec in param_specs(config, config.block_kind) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.init {
            Init::HeUniform(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
        };
        params.insert(spec.name, Tensor::new(&spec.shape, data)?);
    }
    Ok(Model {
        config: config.clone(),
        params,
        trained_iterations: 0,
    })
}

impl Model {
    /// Assemble a model from named tensors, checking them against the config.
    pub fn from_parts(config: VbNetConfig, params: BTreeMap<String, Tensor<f32>>, trained_iterations: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(&config, config.block_kind);
        if specs.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params.get(&spec.name).ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: spec.name.clone(),
                    got: t.shape().to_vec(),
                    expected: spec.shape.clone(),
                });
            }
        }
        Ok(Self {
            config,
            params,
            trained_iterations,
        })
    }

    pub fn config(&self) -> &VbNetConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Record every parameter as a leaf of `graph`.
    pub fn params_to_graph<T: Scalar>(&self, graph: &mut Graph<T>, requires_grad: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), graph.leaf(v.cast(), requires_grad)))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != 4 || shape[0] != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                detail: format!("expected (1, D, H, W), got {shape:?}"),
            }
            .into());
        }
        let f = self.config.size_factor();
        let dims = [shape[1], shape[2], shape[3]];
        if dims.iter().any(|d| d % f != 0) {
            return Err(ModelError::IndivisibleDims { dims, factor: f });
        }
        Ok(())
    }

    /// Probability map for a normalised `(1, D, H, W)` input.
    pub fn forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        self.forward_ablated(input, Ablation::default())
    }

    pub fn forward_ablated(&self, input: &Tensor<f32>, ablation: Ablation) -> Result<Tensor<f32>, ModelError> {
        self.check_input(input.shape())?;
        let _ftz = FlushDenormals::new();
        let mut backend = EagerBackend::<f32>::new(&self.params);
        let x = Arc::new(input.clone());
        let out = network::forward_network(&mut backend, &self.config, &x, ablation)?;
        drop(backend);
        Ok(Arc::try_unwrap(out).unwrap_or_else(|a| (*a).clone()))
    }

    /// Record the forward pass on `graph` for training.
    pub fn forward_graph<T: Scalar>(&self, graph: &mut Graph<T>, params: &BTreeMap<String, Var>, input: Var) -> Result<Var, ModelError> {
        self.check_input(graph.value(input).shape())?;
        let mut backend = GraphBackend { graph, params };
        network::forward_network(&mut backend, &self.config, &input, Ablation::default())
    }

    /// Foreground probability for every voxel of `volume` (lung-windowed
    /// input, edge-padded to a multiple of the size factor and cropped back).
    pub fn predict(&self, volume: &Volume) -> Result<Vec<f32>, ModelError> {
        let [nx, ny, nz] = volume.dims();
        let windowed = lung_window(volume);
        let f = self.config.size_factor();
        let pad = |n: usize| n.div_ceil(f) * f;
        let (px, py, pz) = (pad(nx), pad(ny), pad(nz));
        let input = if (px, py, pz) == (nx, ny, nz) {
            windowed
        } else {
            let mut out = Vec::with_capacity(px * py * pz);
            for z in 0..pz {
                for y in 0..py {
                    let row = (z.min(nz - 1) * ny + y.min(ny - 1)) * nx;
                    for x in 0..px {
                        out.push(windowed[row + x.min(nx - 1)]);
                    }
                }
            }
            out
        };
        let probs = self.forward(&Tensor::new(&[1, pz, py, px], input)?)?;
        if (px, py, pz) == (nx, ny, nz) {
            return Ok(probs.into_data());
        }
        let p = probs.data();
        let mut out = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                let row = (z * py + y) * px;
                out.extend_from_slice(&p[row..row + nx]);
            }
        }
        Ok(out)
    }

    /// Binary infection mask: voxel is foreground iff probability > threshold.
    pub fn segment(&self, volume: &Volume, threshold: f32) -> Result<LabelMask, ModelError> {
        check_threshold(threshold)?;
        let probs = self.predict(volume)?;
        Ok(threshold_mask(volume, &probs, threshold))
    }

    /// Parameter count of this architecture with the given block kind.
    pub fn param_count_as(&self, kind: BlockKind) -> usize {
        param_count(&self.config, kind)
    }
}

pub fn check_threshold(threshold: f32) -> Result<(), ModelError> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(ModelError::BadThreshold(threshold));
    }
    Ok(())
}

/// Strict thresholding; ties at exactly `threshold` go to background.
pub fn threshold_mask(volume: &Volume, probs: &[f32], threshold: f32) -> LabelMask {
    let fg: Vec<bool> = probs.iter().map(|&p| p > threshold).collect();
    LabelMask::binary(*volume.geometry(), &fg, INFECTION_LABEL).expect("geometry matches")
}

/// Name of label `1` in binary infection masks.
pub const INFECTION_LABEL: &str = "infection";

/// Total parameters (weights, biases and PReLU slopes) of `config` built with `kind` blocks.
pub fn param_count(config: &VbNetConfig, kind: BlockKind) -> usize {
    param_specs(config, kind)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Whole-model parameter counts `(bottleneck, plain)`.
pub fn compare_plain(config: &VbNetConfig) -> Result<(usize, usize), ModelError> {
    config.validate()?;
    Ok((param_count(config, BlockKind::Bottleneck), param_count(config, BlockKind::Plain)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VbNetConfig {
        VbNetConfig {
            levels: 2,
            channels_per_level: vec![8, 16],
            blocks_per_level: vec![1, 1],
            bottleneck_ratio: 4,
            ..VbNetConfig::default()
        }
    }

    #[test]
    fn block_counts() {
        assert_eq!(compare_plain_block(64, 16).unwrap(), (8_960, 110_592));
        assert_eq!(compare_plain_block(1, 1).unwrap(), (29, 27));
        let c = 12;
        assert_eq!(compare_plain_block(c, c).unwrap().0, 29 * c * c);
        assert!(compare_plain_block(4, 5).is_err());
        assert!(compare_plain_block(4, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.levels = 1;
        c.channels_per_level = vec![8];
        c.blocks_per_level = vec![1];
        assert!(build_vbnet(&c, 0).is_err());
        let mut c = tiny();
        c.channels_per_level = vec![16, 8];
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_vbnet(&tiny(), 7).unwrap();
        let b = build_vbnet(&tiny(), 7).unwrap();
        let c = build_vbnet(&tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.param_count(), param_count(&tiny(), BlockKind::Bottleneck));
    }

    #[test]
    fn forward_shape_and_range() {
        let m = build_vbnet(&tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::uniform(&[1, 16, 16, 16], 0.0, 1.0, &mut rng);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16, 16]);
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(m.forward(&x).unwrap(), y);
    }

    #[test]
    fn zero_input_gives_half() {
        let m = build_vbnet(&tiny(), 5).unwrap();
        let y = m.forward(&Tensor::zeros(&[1, 8, 8, 8])).unwrap();
        assert!(y.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let m = build_vbnet(&tiny(), 1).unwrap();
        assert_eq!(
            m.forward(&Tensor::zeros(&[1, 7, 8, 8])).unwrap_err(),
            ModelError::IndivisibleDims { dims: [7, 8, 8], factor: 2 }
        );
    }

    #[test]
    fn thresholding_is_strict() {
        let v = Volume::filled(crate::volume::Geometry::isotropic([2, 2, 1]), 0.0);
        let m = threshold_mask(&v, &[0.5; 4], 0.5);
        assert_eq!(m.foreground_count(), 0);
        let m = threshold_mask(&v, &[0.1, 0.2, 0.3, 0.4], 0.0);
        assert_eq!(m.foreground_count(), 4);
        assert!(check_threshold(1.0).is_err());
        assert!(check_threshold(-0.1).is_err());
    }

    #[test]
    fn predict_pads_odd_volumes() {
        let m = build_vbnet(&tiny(), 2).unwrap();
        let g = crate::volume::Geometry::isotropic([5, 7, 3]);
        let data = (0..g.voxel_count()).map(|i| -1000.0 + i as f32).collect();
        let v = Volume::new(g, data).unwrap();
        let p = m.predict(&v).unwrap();
        assert_eq!(p.len(), 105);
        let mask = m.segment(&v, 0.5).unwrap();
        assert_eq!(mask.geometry(), v.geometry());
    }

    #[test]
    fn ablations_change_output() {
        let m = build_vbnet(&tiny(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::uniform(&[1, 8, 8, 8], 0.0, 1.0, &mut rng);
        let base = m.forward(&x).unwrap();
        let bridge = m
            .forward_ablated(&x, Ablation { zero_bridge: true, zero_skip: None })
            .unwrap();
        let skip = m
            .forward_ablated(&x, Ablation { zero_bridge: false, zero_skip: Some(0) })
            .unwrap();
        assert_ne!(base, bridge);
        assert_ne!(base, skip);
    }
}
