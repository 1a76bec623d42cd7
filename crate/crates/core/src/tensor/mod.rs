//! Dense rank-4 tensors, the operator set the blocks need, and reverse-mode
//! differentiation.
//!
//! Every tensor is laid out as `(N, C, H, W)` in row-major order. Storage is
//! shared behind an [`Arc`], so cloning is cheap and tensors can be sent
//! between threads freely; mutation goes through copy-on-write.
//!
//! Forward kernels live in [`ops`], the tape in [`tape`]. Block code is
//! written once against the [`Backend`] trait and runs either eagerly
//! ([`Eager`]) or recorded on a [`GradTape`].

mod backend;
mod conv_spec;
mod fd;
pub mod ops;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

pub use backend::{Backend, BnRef, BnStats, Eager, TapKind};
pub use conv_spec::ConvSpec;
pub use fd::{finite_diff_grad, relative_error};
pub use tape::{GradTape, Gradients, Var};

/// `(N, C, H, W)`.
pub type Dims = [usize; 4];

/// Element type of a tensor. Implemented for `f32` (storage everywhere) and
/// `f64` (used by gradient verification).
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Converts an `f32` tensor into this precision. Free for `f32`.
    fn from_f32_tensor(t: &Tensor<f32>) -> Tensor<Self>;

    /// `C = A·B (+ C if accumulate)` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    );
}

fn check_gemm_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand {what} out of bounds"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path, $conv:expr) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn from_f32_tensor(t: &Tensor<f32>) -> Tensor<Self> {
                $conv(t)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
                accumulate: bool,
            ) {
                check_gemm_extent(a.len(), m, k, rsa, csa, "a");
                check_gemm_extent(b.len(), k, n, rsb, csb, "b");
                check_gemm_extent(c.len(), m, n, rsc, csc, "c");
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every operand's extent was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm, |t: &Tensor<f32>| t.clone());
impl_scalar!(f64, "f64", matrixmultiply::dgemm, |t: &Tensor<f32>| t.cast::<f64>());

/// Dense `(N, C, H, W)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Dims,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking length and finiteness.
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return shape_err(
                "Tensor::new",
                format!("dims {dims:?} need {expected} values, got {}", data.len()),
            );
        }
        let t = Self {
            dims,
            data: Arc::new(data),
        };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Internal constructor for kernels that already guarantee the length.
    pub(crate) fn from_parts(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data: Arc::new(data),
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Self::from_parts(dims, vec![value; dims.iter().product()])
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Self::from_parts(dims, data)
    }

    /// Per-channel vector stored as `(C, 1, 1, 1)`.
    pub fn vector(values: Vec<T>) -> Self {
        Self::from_parts([values.len(), 1, 1, 1], values)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts([1, 1, 1, 1], vec![value])
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn(dims: Dims, std: f64, rng: &mut impl Rng) -> Self {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self::from_parts(dims, data)
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform(dims: Dims, bound: f64, rng: &mut impl Rng) -> Self {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        Self::from_parts(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; clones the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.dims;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], value: T) {
        let off = self.offset(idx);
        self.data_mut()[off] = value;
    }

    /// Reinterprets the buffer with new dims of equal volume.
    pub fn reshape(&self, dims: Dims) -> Result<Self> {
        if dims.iter().product::<usize>() != self.numel() {
            return shape_err(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            );
        }
        Ok(Self {
            dims,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.dims,
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }

    /// Largest elementwise absolute difference. Panics on mismatched dims.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()))
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Channels `[start, start + len)` as a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if start + len > c {
            return shape_err(
                "slice_channels",
                format!("range {start}..{} exceeds {c} channels", start + len),
            );
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let from = (b * c + start) * plane;
            data.extend_from_slice(&self.data[from..from + len * plane]);
        }
        Ok(Self::from_parts([n, len, h, w], data))
    }

    /// Sample `index` along N as a `(1, C, H, W)` tensor.
    pub fn sample(&self, index: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if index >= n {
            return shape_err("sample", format!("index {index} out of {n}"));
        }
        let len = c * h * w;
        Ok(Self::from_parts(
            [1, c, h, w],
            self.data[index * len..(index + 1) * len].to_vec(),
        ))
    }

    /// Stacks `(1, C, H, W)`-compatible tensors along N.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let [tn, tc, th, tw] = t.dims;
            if (tc, th, tw) != (c, h, w) {
                return shape_err("stack", format!("{:?} vs {:?}", t.dims, first.dims));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_parts([n, c, h, w], data))
    }
}
