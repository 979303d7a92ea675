//! Forward and backward kernels shared by the autodiff graph and the eager
//! inference path.
//!
//! Convolutions lower to GEMM through an im2col buffer laid out as
//! `[Cin * kz * ky * kx, output voxels]`.

use super::{Result, Scalar, Tensor, TensorError};

/// Stride and zero padding of a 3-D convolution, per axis `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvParams {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    /// Spatial extent of `conv3d` applied to `input` with kernel extent `kernel`.
    pub fn conv_output(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.stride[a] == 0 {
                return Err(TensorError::InvalidArgument {
                    op: "conv3d",
                    detail: "stride must be >= 1".into(),
                });
            }
            let padded = input[a] + 2 * self.padding[a];
            if padded < kernel[a] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv3d",
                    detail: format!(
                        "padded extent {padded} smaller than kernel {} on axis {a}",
                        kernel[a]
                    ),
                });
            }
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Spatial extent of `conv3d_transpose`: `(D - 1) * stride + k - 2p`.
    pub fn transpose_output(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.stride[a] == 0 {
                return Err(TensorError::InvalidArgument {
                    op: "conv3d_transpose",
                    detail: "stride must be >= 1".into(),
                });
            }
            let full = (input[a] - 1) * self.stride[a] + kernel[a];
            if full <= 2 * self.padding[a] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv3d_transpose",
                    detail: format!("padding {} too large on axis {a}", self.padding[a]),
                });
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }

    fn is_pointwise(&self, kernel: [usize; 3]) -> bool {
        kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

fn vol(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

fn kernel_extent<T: Scalar>(kernel: &Tensor<T>, op: &'static str) -> Result<[usize; 3]> {
    if kernel.shape().len() != 5 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("kernel must be rank 5, got {:?}", kernel.shape()),
        });
    }
    let s = kernel.shape();
    Ok([s[2], s[3], s[4]])
}

fn feature_map<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, [usize; 3])> {
    if x.shape().len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("feature map must be (C, D, H, W), got {:?}", x.shape()),
        });
    }
    Ok((x.channels(), x.spatial()))
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("bias shape {:?}, expected [{channels}]", b.shape()),
            });
        }
    }
    Ok(())
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // input index = o * stride + k - pad must be in [0, in_len)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold `input` (channels × `in_dims`) into the im2col matrix.
pub fn im2col<T: Scalar>(
    input: &[T],
    channels: usize,
    in_dims: [usize; 3],
    kernel: [usize; 3],
    params: ConvParams,
    out_dims: [usize; 3],
) -> Vec<T> {
    let kvol = vol(kernel);
    let n_out = vol(out_dims);
    let n_in = vol(in_dims);
    let mut cols = vec![T::zero(); channels * kvol * n_out];
    let [sz, sy, sx] = params.stride;
    let [pz, py, px] = params.padding;
    for c in 0..channels {
        let src = &input[c * n_in..(c + 1) * n_in];
        for kz in 0..kernel[0] {
            let (z0, z1) = valid_range(out_dims[0], in_dims[0], sz, pz, kz);
            for ky in 0..kernel[1] {
                let (y0, y1) = valid_range(out_dims[1], in_dims[1], sy, py, ky);
                for kx in 0..kernel[2] {
                    let (x0, x1) = valid_range(out_dims[2], in_dims[2], sx, px, kx);
                    let row = (c * kvol) + (kz * kernel[1] + ky) * kernel[2] + kx;
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for oz in z0..z1 {
                        let iz = oz * sz + kz - pz;
                        for oy in y0..y1 {
                            let iy = oy * sy + ky - py;
                            let in_row = (iz * in_dims[1] + iy) * in_dims[2];
                            let out_row = (oz * out_dims[1] + oy) * out_dims[2];
                            if sx == 1 {
                                let ix0 = x0 + kx - px;
                                dst[out_row + x0..out_row + x1]
                                    .copy_from_slice(&src[in_row + ix0..in_row + ix0 + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    dst[out_row + ox] = src[in_row + ox * sx + kx - px];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold an im2col matrix back, accumulating into `output` (channels × `in_dims`).
pub fn col2im<T: Scalar>(
    cols: &[T],
    channels: usize,
    in_dims: [usize; 3],
    kernel: [usize; 3],
    params: ConvParams,
    out_dims: [usize; 3],
    output: &mut [T],
) {
    let kvol = vol(kernel);
    let n_out = vol(out_dims);
    let n_in = vol(in_dims);
    let [sz, sy, sx] = params.stride;
    let [pz, py, px] = params.padding;
    for c in 0..channels {
        let dst = &mut output[c * n_in..(c + 1) * n_in];
        for kz in 0..kernel[0] {
            let (z0, z1) = valid_range(out_dims[0], in_dims[0], sz, pz, kz);
            for ky in 0..kernel[1] {
                let (y0, y1) = valid_range(out_dims[1], in_dims[1], sy, py, ky);
                for kx in 0..kernel[2] {
                    let (x0, x1) = valid_range(out_dims[2], in_dims[2], sx, px, kx);
                    let row = (c * kvol) + (kz * kernel[1] + ky) * kernel[2] + kx;
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oz in z0..z1 {
                        let iz = oz * sz + kz - pz;
                        for oy in y0..y1 {
                            let iy = oy * sy + ky - py;
                            let in_row = (iz * in_dims[1] + iy) * in_dims[2];
                            let out_row = (oz * out_dims[1] + oy) * out_dims[2];
                            for ox in x0..x1 {
                                let ix = ox * sx + kx - px;
                                dst[in_row + ix] = dst[in_row + ix] + src[out_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, per_channel: usize) {
    if let Some(b) = bias {
        for (c, &bv) in b.data().iter().enumerate() {
            for v in &mut out[c * per_channel..(c + 1) * per_channel] {
                *v = *v + bv;
            }
        }
    }
}

fn bias_grad<T: Scalar>(grad_out: &[T], channels: usize) -> Tensor<T> {
    let per = grad_out.len() / channels;
    let data = (0..channels)
        .map(|c| grad_out[c * per..(c + 1) * per].iter().copied().sum())
        .collect();
    Tensor::new(&[channels], data).expect("bias grad shape")
}

/// Zero-padded 3-D cross-correlation.
///
/// `input` is `(Cin, D, H, W)`, `kernel` is `(Cout, Cin, kz, ky, kx)`.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: ConvParams,
) -> Result<Tensor<T>> {
    let (cin, in_dims) = feature_map(input, "conv3d")?;
    let k = kernel_extent(kernel, "conv3d")?;
    let cout = kernel.shape()[0];
    if kernel.shape()[1] != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            detail: format!("input has {cin} channels, kernel expects {}", kernel.shape()[1]),
        });
    }
    check_bias(bias, cout, "conv3d")?;
    let out_dims = params.conv_output(in_dims, k)?;
    let n_out = vol(out_dims);
    let kdim = cin * vol(k);
    let mut out = vec![T::zero(); cout * n_out];
    if params.is_pointwise(k) {
        T::gemm(cout, kdim, n_out, T::one(), kernel.data(), (kdim as isize, 1), input.data(), (n_out as isize, 1), T::zero(), &mut out, (n_out as isize, 1));
    } else {
        let cols = im2col(input.data(), cin, in_dims, k, params, out_dims);
        T::gemm(cout, kdim, n_out, T::one(), kernel.data(), (kdim as isize, 1), &cols, (n_out as isize, 1), T::zero(), &mut out, (n_out as isize, 1));
    }
    add_bias(&mut out, bias, n_out);
    Tensor::new(&[cout, out_dims[0], out_dims[1], out_dims[2]], out)
}

/// Gradients of [`conv3d`] with respect to input, kernel and bias.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    params: ConvParams,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let cin = input.channels();
    let in_dims = input.spatial();
    let k = [kernel.shape()[2], kernel.shape()[3], kernel.shape()[4]];
    let cout = kernel.shape()[0];
    let out_dims = grad_out.spatial();
    let n_out = vol(out_dims);
    let kdim = cin * vol(k);
    let go = grad_out.data();

    let mut grad_kernel = vec![T::zero(); cout * kdim];
    let mut grad_input = vec![T::zero(); input.len()];
    if params.is_pointwise(k) {
        T::gemm(cout, n_out, kdim, T::one(), go, (n_out as isize, 1), input.data(), (1, n_out as isize), T::zero(), &mut grad_kernel, (kdim as isize, 1));
        T::gemm(kdim, cout, n_out, T::one(), kernel.data(), (1, kdim as isize), go, (n_out as isize, 1), T::zero(), &mut grad_input, (n_out as isize, 1));
    } else {
        let cols = im2col(input.data(), cin, in_dims, k, params, out_dims);
        T::gemm(cout, n_out, kdim, T::one(), go, (n_out as isize, 1), &cols, (1, n_out as isize), T::zero(), &mut grad_kernel, (kdim as isize, 1));
        drop(cols);
        let mut grad_cols = vec![T::zero(); kdim * n_out];
        T::gemm(kdim, cout, n_out, T::one(), kernel.data(), (1, kdim as isize), go, (n_out as isize, 1), T::zero(), &mut grad_cols, (n_out as isize, 1));
        col2im(&grad_cols, cin, in_dims, k, params, out_dims, &mut grad_input);
    }
    (
        Tensor::new(input.shape(), grad_input).expect("grad input shape"),
        Tensor::new(kernel.shape(), grad_kernel).expect("grad kernel shape"),
        bias_grad(go, cout),
    )
}

/// Transposed convolution, the adjoint of [`conv3d`] for the same kernel.
///
/// `input` is `(Cy, D, H, W)`, `kernel` is `(Cy, Cx, kz, ky, kx)`; the output
/// has `Cx` channels and extent `(D - 1) * stride + k - 2 * padding` per axis.
pub fn conv3d_transpose<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: ConvParams,
) -> Result<Tensor<T>> {
    let (cy, in_dims) = feature_map(input, "conv3d_transpose")?;
    let k = kernel_extent(kernel, "conv3d_transpose")?;
    if kernel.shape()[0] != cy {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_transpose",
            detail: format!("input has {cy} channels, kernel expects {}", kernel.shape()[0]),
        });
    }
    let cx = kernel.shape()[1];
    check_bias(bias, cx, "conv3d_transpose")?;
    let out_dims = params.transpose_output(in_dims, k)?;
    let n_in = vol(in_dims);
    let n_out = vol(out_dims);
    let kdim = cx * vol(k);
    let mut out = vec![T::zero(); cx * n_out];
    if params.is_pointwise(k) {
        T::gemm(kdim, cy, n_in, T::one(), kernel.data(), (1, kdim as isize), input.data(), (n_in as isize, 1), T::zero(), &mut out, (n_in as isize, 1));
    } else {
        let mut cols = vec![T::zero(); kdim * n_in];
        T::gemm(kdim, cy, n_in, T::one(), kernel.data(), (1, kdim as isize), input.data(), (n_in as isize, 1), T::zero(), &mut cols, (n_in as isize, 1));
        col2im(&cols, cx, out_dims, k, params, in_dims, &mut out);
    }
    add_bias(&mut out, bias, n_out);
    Tensor::new(&[cx, out_dims[0], out_dims[1], out_dims[2]], out)
}

/// Gradients of [`conv3d_transpose`] with respect to input, kernel and bias.
pub fn conv3d_transpose_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    params: ConvParams,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let cy = input.channels();
    let in_dims = input.spatial();
    let k = [kernel.shape()[2], kernel.shape()[3], kernel.shape()[4]];
    let cx = kernel.shape()[1];
    let out_dims = grad_out.spatial();
    let n_in = vol(in_dims);
    let kdim = cx * vol(k);
    let go = grad_out.data();

    let mut grad_input = vec![T::zero(); input.len()];
    let mut grad_kernel = vec![T::zero(); cy * kdim];
    let owned;
    let cols: &[T] = if params.is_pointwise(k) {
        go
    } else {
        owned = im2col(go, cx, out_dims, k, params, in_dims);
        &owned
    };
    T::gemm(cy, kdim, n_in, T::one(), kernel.data(), (kdim as isize, 1), cols, (n_in as isize, 1), T::zero(), &mut grad_input, (n_in as isize, 1));
    T::gemm(cy, n_in, kdim, T::one(), input.data(), (n_in as isize, 1), cols, (1, n_in as isize), T::zero(), &mut grad_kernel, (kdim as isize, 1));
    (
        Tensor::new(input.shape(), grad_input).expect("grad input shape"),
        Tensor::new(kernel.shape(), grad_kernel).expect("grad kernel shape"),
        bias_grad(go, cx),
    )
}

fn check_slope<T: Scalar>(input: &Tensor<T>, slope: &Tensor<T>) -> Result<usize> {
    let c = input.shape()[0];
    if slope.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "prelu",
            detail: format!("slope shape {:?}, expected [{c}]", slope.shape()),
        });
    }
    Ok(input.len() / c)
}

/// `x` where positive, `slope[c] * x` otherwise; one slope per leading-axis channel.
pub fn prelu<T: Scalar>(input: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    let per = check_slope(input, slope)?;
    let mut out = input.clone();
    for (c, &a) in slope.data().iter().enumerate() {
        for v in &mut out.data_mut()[c * per..(c + 1) * per] {
            if *v <= T::zero() {
                *v = a * *v;
            }
        }
    }
    Ok(out)
}

pub fn prelu_backward<T: Scalar>(
    input: &Tensor<T>,
    slope: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let c = input.shape()[0];
    let per = input.len() / c;
    let mut gx = grad_out.clone();
    let mut ga = vec![T::zero(); c];
    for (ch, &a) in slope.data().iter().enumerate() {
        let xs = &input.data()[ch * per..(ch + 1) * per];
        let gs = &mut gx.data_mut()[ch * per..(ch + 1) * per];
        let mut acc = T::zero();
        for (g, &x) in gs.iter_mut().zip(xs) {
            if x <= T::zero() {
                acc = acc + *g * x;
                *g = *g * a;
            }
        }
        ga[ch] = acc;
    }
    (gx, Tensor::new(&[c], ga).expect("slope grad shape"))
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| T::one() / (T::one() + (-x).exp()))
}

/// Soft Dice loss `1 - (2 Σ p t + s) / (Σ p + Σ t + s)`.
pub fn soft_dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, smooth: T) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "soft_dice_loss",
            detail: format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        });
    }
    let (inter, sum_p, sum_t) = dice_sums(pred, target);
    let two = T::one() + T::one();
    Ok(T::one() - (two * inter + smooth) / (sum_p + sum_t + smooth))
}

pub(crate) fn dice_sums<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> (T, T, T) {
    let mut inter = T::zero();
    let mut sum_p = T::zero();
    let mut sum_t = T::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        inter = inter + p * t;
        sum_p = sum_p + p;
        sum_t = sum_t + t;
    }
    (inter, sum_p, sum_t)
}

/// Gradient of [`soft_dice_loss`] with respect to `pred`, scaled by `upstream`.
pub fn soft_dice_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, smooth: T, upstream: T) -> Tensor<T> {
    let (inter, sum_p, sum_t) = dice_sums(pred, target);
    let two = T::one() + T::one();
    let union = sum_p + sum_t + smooth;
    let numer = two * inter + smooth;
    let inv_u2 = T::one() / (union * union);
    let data = target
        .data()
        .iter()
        .map(|&t| -(two * t * union - numer) * inv_u2 * upstream)
        .collect();
    Tensor::new(pred.shape(), data).expect("dice grad shape")
}

/// Concatenate feature maps along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(TensorError::InvalidArgument {
        op: "concat",
        detail: "no inputs".into(),
    })?;
    let tail = &first.shape()[1..];
    let mut channels = 0;
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: format!("{:?} vs {:?}", first.shape(), p.shape()),
            });
        }
        channels += p.shape()[0];
    }
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(tail);
    Tensor::new(&shape, data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}
