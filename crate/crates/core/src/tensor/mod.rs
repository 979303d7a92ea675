//! Dense tensors and a small reverse-mode autodiff engine.
//!
//! Feature maps use the `(channels, z, y, x)` layout with `x` varying fastest,
//! which matches the voxel order of [`crate::volume::Volume`]. The operator
//! set is deliberately closed to what the segmentation network needs.

mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{grad_check, grad_check_mixed, max_relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;

/// Maximum supported tensor rank.
pub const MAX_RANK: usize = 5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("invalid shape {0:?}: dims must be positive and rank <= 5")]
    InvalidShape(Vec<usize>),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating point element type of a tensor.
///
/// Implemented for `f32` (training) and `f64` (gradient checking).
pub trait Scalar: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha * a · b + beta * c` with arbitrary strides (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(gemm_fits(m, k, a_strides, a.len()), "gemm: lhs out of bounds");
                assert!(gemm_fits(k, n, b_strides, b.len()), "gemm: rhs out of bounds");
                assert!(gemm_fits(m, n, c_strides, c.len()), "gemm: output out of bounds");
                // SAFETY: every index touched by the kernel lies inside the
                // slices, checked by `gemm_fits` above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }

            fn lit(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

fn gemm_fits(rows: usize, cols: usize, strides: (isize, isize), len: usize) -> bool {
    if rows == 0 || cols == 0 {
        return true;
    }
    if strides.0 < 0 || strides.1 < 0 {
        return false;
    }
    let last = (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize;
    last < len
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        validate_shape(shape).expect("invalid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        validate_shape(shape).expect("invalid shape");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of channels of a `(C, D, H, W)` feature map.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Spatial extent `(D, H, W)` of a feature map.
    pub fn spatial(&self) -> [usize; 3] {
        let r = self.shape.len();
        [self.shape[r - 3], self.shape[r - 2], self.shape[r - 1]]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::DataLength {
                len: self.data.len(),
                shape: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn dot(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.data.len(), other.data.len(), "dot length mismatch");
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Flushes subnormal floats to zero on the current thread while alive.
///
/// Saturated sigmoids produce subnormal gradients, which are extremely slow
/// on x86. The previous floating-point mode is restored on drop.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
#[allow(deprecated)]
impl FlushDenormals {
    const FTZ_DAZ: u32 = (1 << 15) | (1 << 6);

    pub fn new() -> Self {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        // SAFETY: SSE is baseline on x86_64; only the FTZ and DAZ bits change.
        let saved = unsafe { _mm_getcsr() };
        unsafe { _mm_setcsr(saved | Self::FTZ_DAZ) };
        Self { saved }
    }
}

#[cfg(target_arch = "x86_64")]
#[allow(deprecated)]
impl Drop for FlushDenormals {
    fn drop(&mut self) {
        // SAFETY: restores the register value read in `new`.
        unsafe { std::arch::x86_64::_mm_setcsr(self.saved) };
    }
}

#[cfg(not(target_arch = "x86_64"))]
impl FlushDenormals {
    pub fn new() -> Self {
        Self {}
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            Tensor::<f32>::new(&[2, 2], vec![0.0; 3]),
            Err(TensorError::DataLength { .. })
        ));
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f32>::new(&[0], vec![]).is_err());
    }

    #[test]
    fn gemm_transposed_strides() {
        // a is 2x3 row-major, used as a^T (3x2)
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [0.0f64; 6];
        f64::gemm(3, 2, 2, 1.0, &a, (1, 3), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
