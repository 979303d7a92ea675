use super::kernels::{self, ConvParams};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        params: ConvParams,
    },
    ConvTranspose {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        params: ConvParams,
    },
    Prelu {
        input: Var,
        slope: Var,
    },
    Sigmoid {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    SoftDice {
        pred: Var,
        target: Var,
        smooth: T,
    },
    Project {
        input: Var,
        weights: Tensor<T>,
    },
    Map {
        input: Var,
        derivative: fn(T) -> T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are stored in execution order, which
/// is also a valid topological order for the backward sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`. Nodes the loss does not
    /// depend on get an all-zero gradient.
    pub fn get(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Parameters are leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, params: ConvParams) -> Result<Var> {
        let out = kernels::conv3d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            params,
        )?;
        let rg = self.needs_grad(&[input, kernel]) || bias.is_some_and(|b| self.nodes[b.0].requires_grad);
        Ok(self.push(out, Op::Conv { input, kernel, bias, params }, rg))
    }

    pub fn conv3d_transpose(&mut self, input: Var, kernel: Var, bias: Option<Var>, params: ConvParams) -> Result<Var> {
        let out = kernels::conv3d_transpose(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            params,
        )?;
        let rg = self.needs_grad(&[input, kernel]) || bias.is_some_and(|b| self.nodes[b.0].requires_grad);
        Ok(self.push(out, Op::ConvTranspose { input, kernel, bias, params }, rg))
    }

    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        let out = kernels::prelu(self.value(input), self.value(slope))?;
        let rg = self.needs_grad(&[input, slope]);
        Ok(self.push(out, Op::Prelu { input, slope }, rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = kernels::sigmoid(self.value(input));
        let rg = self.needs_grad(&[input]);
        self.push(out, Op::Sigmoid { input }, rg)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let out = kernels::add(self.value(lhs), self.value(rhs))?;
        let rg = self.needs_grad(&[lhs, rhs]);
        Ok(self.push(out, Op::Add { lhs, rhs }, rg))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values)?;
        let rg = self.needs_grad(parts);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn soft_dice_loss(&mut self, pred: Var, target: Var, smooth: T) -> Result<Var> {
        let loss = kernels::soft_dice_loss(self.value(pred), self.value(target), smooth)?;
        let rg = self.needs_grad(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftDice { pred, target, smooth }, rg))
    }

    /// Scalar projection `Σ wᵢ xᵢ` with constant weights. Used to reduce a
    /// tensor-valued op to a scalar when checking gradients.
    pub fn project(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(input).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "project",
                detail: format!("{:?} vs {:?}", weights.shape(), self.value(input).shape()),
            });
        }
        let v = self.value(input).dot(&weights);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Tensor::scalar(v), Op::Project { input, weights }, rg))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&mut self, input: Var, f: fn(T) -> T, derivative: fn(T) -> T) -> Var {
        let out = self.value(input).map(f);
        let rg = self.needs_grad(&[input]);
        self.push(out, Op::Map { input, derivative }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv { input, kernel, bias, params } => {
                    let (gi, gk, gb) = kernels::conv3d_backward(self.value(*input), self.value(*kernel), *params, &g);
                    self.accumulate(&mut grads, *input, gi);
                    self.accumulate(&mut grads, *kernel, gk);
                    if let Some(b) = bias {
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::ConvTranspose { input, kernel, bias, params } => {
                    let (gi, gk, gb) =
                        kernels::conv3d_transpose_backward(self.value(*input), self.value(*kernel), *params, &g);
                    self.accumulate(&mut grads, *input, gi);
                    self.accumulate(&mut grads, *kernel, gk);
                    if let Some(b) = bias {
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Prelu { input, slope } => {
                    let (gx, ga) = kernels::prelu_backward(self.value(*input), self.value(*slope), &g);
                    self.accumulate(&mut grads, *input, gx);
                    self.accumulate(&mut grads, *slope, ga);
                }
                Op::Sigmoid { input } => {
                    let mut gx = g;
                    for (d, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *d = *d * y * (T::one() - y);
                    }
                    self.accumulate(&mut grads, *input, gx);
                }
                Op::Add { lhs, rhs } => {
                    self.accumulate(&mut grads, *lhs, g.clone());
                    self.accumulate(&mut grads, *rhs, g);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.value(*p).shape().to_vec();
                        let n = self.value(*p).len();
                        let part = Tensor::new(&shape, g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        self.accumulate(&mut grads, *p, part);
                    }
                }
                Op::SoftDice { pred, target, smooth } => {
                    let gp = kernels::soft_dice_backward(self.value(*pred), self.value(*target), *smooth, g.data()[0]);
                    self.accumulate(&mut grads, *pred, gp);
                }
                Op::Project { input, weights } => {
                    let up = g.data()[0];
                    self.accumulate(&mut grads, *input, weights.map(|w| w * up));
                }
                Op::Map { input, derivative } => {
                    let mut gx = g;
                    for (d, &x) in gx.data_mut().iter_mut().zip(self.value(*input).data()) {
                        *d = *d * derivative(x);
                    }
                    self.accumulate(&mut grads, *input, gx);
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}
