//! Network definition, written once against [`Backend`] so the same layer
//! graph drives training (autodiff tape), inference (eager tensors) and
//! test oracles.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{BlockKind, ModelError, VbNetConfig};
use crate::tensor::kernels::{self, ConvParams};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

const SAME3: ConvParams = ConvParams::new(1, 1);
const POINTWISE: ConvParams = ConvParams::new(1, 0);
const DOWN: ConvParams = ConvParams::new(2, 0);

/// Operations the network needs from an execution engine.
pub trait Backend<T: Scalar> {
    type Value: Clone;

    fn param(&mut self, name: &str) -> Result<Self::Value, ModelError>;
    fn conv3d(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value, p: ConvParams) -> Result<Self::Value, TensorError>;
    fn conv3d_transpose(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value, p: ConvParams) -> Result<Self::Value, TensorError>;
    fn prelu(&mut self, x: &Self::Value, slope: &Self::Value) -> Result<Self::Value, TensorError>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn concat(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn sigmoid(&mut self, x: &Self::Value) -> Self::Value;
    fn zeros_like(&mut self, x: &Self::Value) -> Self::Value;
}

/// Records every operation on an autodiff [`Graph`].
pub struct GraphBackend<'a, T> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a BTreeMap<String, Var>,
}

impl<T: Scalar> Backend<T> for GraphBackend<'_, T> {
    type Value = Var;

    fn param(&mut self, name: &str) -> Result<Var, ModelError> {
        self.params.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }
    fn conv3d(&mut self, x: &Var, w: &Var, b: &Var, p: ConvParams) -> Result<Var, TensorError> {
        self.graph.conv3d(*x, *w, Some(*b), p)
    }
    fn conv3d_transpose(&mut self, x: &Var, w: &Var, b: &Var, p: ConvParams) -> Result<Var, TensorError> {
        self.graph.conv3d_transpose(*x, *w, Some(*b), p)
    }
    fn prelu(&mut self, x: &Var, slope: &Var) -> Result<Var, TensorError> {
        self.graph.prelu(*x, *slope)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        self.graph.add(*a, *b)
    }
    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        self.graph.concat(&[*a, *b])
    }
    fn sigmoid(&mut self, x: &Var) -> Var {
        self.graph.sigmoid(*x)
    }
    fn zeros_like(&mut self, x: &Var) -> Var {
        let shape = self.graph.value(*x).shape().to_vec();
        self.graph.leaf(Tensor::zeros(&shape), false)
    }
}

/// Plain tensor evaluation; intermediates are freed as soon as they go out of scope.
pub struct EagerBackend<T> {
    params: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> EagerBackend<T> {
    pub fn new(params: &BTreeMap<String, Tensor<f32>>) -> Self {
        Self {
            params: params.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect(),
        }
    }
}

impl<T: Scalar> Backend<T> for EagerBackend<T> {
    type Value = Arc<Tensor<T>>;

    fn param(&mut self, name: &str) -> Result<Self::Value, ModelError> {
        self.params.get(name).cloned().ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }
    fn conv3d(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value, p: ConvParams) -> Result<Self::Value, TensorError> {
        kernels::conv3d(x, w, Some(b), p).map(Arc::new)
    }
    fn conv3d_transpose(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value, p: ConvParams) -> Result<Self::Value, TensorError> {
        kernels::conv3d_transpose(x, w, Some(b), p).map(Arc::new)
    }
    fn prelu(&mut self, x: &Self::Value, slope: &Self::Value) -> Result<Self::Value, TensorError> {
        kernels::prelu(x, slope).map(Arc::new)
    }
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError> {
        kernels::add(a, b).map(Arc::new)
    }
    fn concat(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError> {
        kernels::concat_channels(&[a, b]).map(Arc::new)
    }
    fn sigmoid(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(kernels::sigmoid(x))
    }
    fn zeros_like(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(Tensor::zeros(x.shape()))
    }
}

/// Targeted feature ablations used to verify information flow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Zero the deepest level's output before the expansive path.
    pub zero_bridge: bool,
    /// Zero the skip tensor of this level.
    pub zero_skip: Option<usize>,
}

/// Shape and initialisation of one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-uniform with the given fan-in.
    HeUniform(usize),
    Zeros,
    Constant(f32),
}

/// Initial PReLU slope.
pub const PRELU_INIT: f32 = 0.25;

struct SpecBuilder(Vec<ParamSpec>);

impl SpecBuilder {
    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        let fan_in = cin * k * k * k;
        self.0.push(ParamSpec {
            name: format!("{prefix}.w"),
            shape: vec![cout, cin, k, k, k],
            init: Init::HeUniform(fan_in),
        });
        self.0.push(ParamSpec {
            name: format!("{prefix}.b"),
            shape: vec![cout],
            init: Init::Zeros,
        });
    }

    fn transpose(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        self.0.push(ParamSpec {
            name: format!("{prefix}.w"),
            shape: vec![cin, cout, k, k, k],
            init: Init::HeUniform(cin * k * k * k),
        });
        self.0.push(ParamSpec {
            name: format!("{prefix}.b"),
            shape: vec![cout],
            init: Init::Zeros,
        });
    }

    fn act(&mut self, name: String, c: usize) {
        self.0.push(ParamSpec {
            name,
            shape: vec![c],
            init: Init::Constant(PRELU_INIT),
        });
    }

    fn block(&mut self, prefix: &str, kind: BlockKind, c: usize, r: usize) {
        match kind {
            BlockKind::Bottleneck => {
                self.conv(&format!("{prefix}.reduce"), r, c, 1);
                self.act(format!("{prefix}.reduce.act"), r);
                self.conv(&format!("{prefix}.conv"), r, r, 3);
                self.act(format!("{prefix}.conv.act"), r);
                self.conv(&format!("{prefix}.expand"), c, r, 1);
            }
            BlockKind::Plain => self.conv(&format!("{prefix}.conv"), c, c, 3),
        }
        self.act(format!("{prefix}.act"), c);
    }
}

/// Channel count leaving decoder level `level` (or the bridge for the deepest level).
pub(crate) fn decoder_channels(config: &VbNetConfig, level: usize) -> usize {
    let c = config.channels_per_level[level];
    if level + 1 == config.levels {
        c
    } else {
        2 * c
    }
}

/// Every parameter of the network, in construction order.
pub fn param_specs(config: &VbNetConfig, kind: BlockKind) -> Vec<ParamSpec> {
    let ch = &config.channels_per_level;
    let mut s = SpecBuilder(Vec::new());
    s.conv("input", ch[0], config.input_channels, 3);
    s.act("input.act".into(), ch[0]);
    for level in 0..config.levels {
        if level > 0 {
            s.conv(&format!("enc{level}.down"), ch[level], ch[level - 1], 2);
            s.act(format!("enc{level}.down.act"), ch[level]);
        }
        for b in 0..config.blocks_per_level[level] {
            s.block(&format!("enc{level}.block{b}"), kind, ch[level], config.reduced(ch[level]));
        }
    }
    for level in (0..config.levels - 1).rev() {
        let below = decoder_channels(config, level + 1);
        s.transpose(&format!("dec{level}.up"), below, ch[level], 2);
        s.act(format!("dec{level}.up.act"), ch[level]);
        let width = decoder_channels(config, level);
        for b in 0..config.blocks_per_level[level] {
            s.block(&format!("dec{level}.block{b}"), kind, width, config.reduced(width));
        }
    }
    s.conv("head", config.output_channels, decoder_channels(config, 0), 1);
    s.0
}

fn conv_act<T: Scalar, B: Backend<T>>(
    b: &mut B,
    prefix: &str,
    x: &B::Value,
    p: ConvParams,
) -> Result<B::Value, ModelError> {
    let w = b.param(&format!("{prefix}.w"))?;
    let bias = b.param(&format!("{prefix}.b"))?;
    let a = b.param(&format!("{prefix}.act"))?;
    let y = b.conv3d(x, &w, &bias, p)?;
    Ok(b.prelu(&y, &a)?)
}

fn block<T: Scalar, B: Backend<T>>(
    b: &mut B,
    prefix: &str,
    config: &VbNetConfig,
    x: &B::Value,
) -> Result<B::Value, ModelError> {
    let pre = match config.block_kind {
        BlockKind::Bottleneck => {
            let h = conv_act(b, &format!("{prefix}.reduce"), x, POINTWISE)?;
            let h = conv_act(b, &format!("{prefix}.conv"), &h, SAME3)?;
            let w = b.param(&format!("{prefix}.expand.w"))?;
            let bias = b.param(&format!("{prefix}.expand.b"))?;
            b.conv3d(&h, &w, &bias, POINTWISE)?
        }
        BlockKind::Plain => {
            let w = b.param(&format!("{prefix}.conv.w"))?;
            let bias = b.param(&format!("{prefix}.conv.b"))?;
            b.conv3d(x, &w, &bias, SAME3)?
        }
    };
    let sum = if config.residual { b.add(x, &pre)? } else { pre };
    let a = b.param(&format!("{prefix}.act"))?;
    Ok(b.prelu(&sum, &a)?)
}

/// Run the network on a `(1, D, H, W)` input and return the probability map.
pub fn forward_network<T: Scalar, B: Backend<T>>(
    b: &mut B,
    config: &VbNetConfig,
    input: &B::Value,
    ablation: Ablation,
) -> Result<B::Value, ModelError> {
    let mut x = conv_act(b, "input", input, SAME3)?;
    let mut skips = Vec::with_capacity(config.levels);
    for level in 0..config.levels {
        if level > 0 {
            x = conv_act(b, &format!("enc{level}.down"), &x, DOWN)?;
        }
        for i in 0..config.blocks_per_level[level] {
            x = block(b, &format!("enc{level}.block{i}"), config, &x)?;
        }
        if level + 1 < config.levels {
            let skip = if ablation.zero_skip == Some(level) { b.zeros_like(&x) } else { x.clone() };
            skips.push(skip);
        }
    }
    if ablation.zero_bridge {
        x = b.zeros_like(&x);
    }
    for level in (0..config.levels - 1).rev() {
        let up = {
            let w = b.param(&format!("dec{level}.up.w"))?;
            let bias = b.param(&format!("dec{level}.up.b"))?;
            let a = b.param(&format!("dec{level}.up.act"))?;
            let y = b.conv3d_transpose(&x, &w, &bias, DOWN)?;
            b.prelu(&y, &a)?
        };
        x = b.concat(&up, &skips[level])?;
        for i in 0..config.blocks_per_level[level] {
            x = block(b, &format!("dec{level}.block{i}"), config, &x)?;
        }
    }
    let w = b.param("head.w")?;
    let bias = b.param("head.b")?;
    let logits = b.conv3d(&x, &w, &bias, POINTWISE)?;
    Ok(b.sigmoid(&logits))
}
