//! Dense rank-1..4 tensors over f32 or f64.
//!
//! Data is a row-major flat buffer; image tensors use NCHW order. A tensor
//! optionally carries a gradient buffer of the same shape, populated by
//! [`crate::tape::Tape::backward`].

use crate::error::{Error, Result};

/// Element type tag, matching the checkpoint wire format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar element of a tensor. f32 is the training dtype, f64 the
/// verification dtype used by the finite-difference oracle.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr) => {
        impl Scalar for $t {
            const DTYPE: Dtype = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("byte width"))
            }
            fn byte_width() -> usize {
                std::mem::size_of::<$t>()
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32);
impl_scalar!(f64, Dtype::F64);

/// Dense tensor with optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    dims: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_dims(&dims)?;
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(
                "tensor",
                format!("data length {} != product of dims {:?}", data.len(), dims),
            ));
        }
        Ok(Tensor {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        Tensor::full(dims, T::ZERO)
    }

    pub fn ones(dims: Vec<usize>) -> Self {
        Tensor::full(dims, T::ONE)
    }

    pub fn full(dims: Vec<usize>, value: T) -> Self {
        check_dims(&dims).expect("valid dims");
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    /// NCHW accessors; panic if the tensor is not rank 4.
    pub fn n(&self) -> usize {
        assert_eq!(
            self.rank(),
            4,
            "nchw accessor on rank-{} tensor",
            self.rank()
        );
        self.dims[0]
    }
    pub fn c(&self) -> usize {
        assert_eq!(self.rank(), 4);
        self.dims[1]
    }
    pub fn h(&self) -> usize {
        assert_eq!(self.rank(), 4);
        self.dims[2]
    }
    pub fn w(&self) -> usize {
        assert_eq!(self.rank(), 4);
        self.dims[3]
    }

    /// Value at a multi-index (test and tooling convenience, not a hot path).
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (d, (&i, &n)) in index.iter().zip(self.dims.iter()).enumerate() {
            assert!(i < n, "index {i} out of bounds for axis {d} of extent {n}");
            flat = flat * n + i;
        }
        self.data[flat]
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Fill with draws from `f` in row-major order.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut() -> T) -> Self {
        check_dims(&dims).expect("valid dims");
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: (0..numel).map(|_| f()).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::shape(
            "tensor",
            format!("rank must be 1..=4, got {:?}", dims),
        ));
    }
    if dims.contains(&0) {
        return Err(Error::shape(
            "tensor",
            format!("zero-sized axis in {:?}", dims),
        ));
    }
    Ok(())
}

/// Output extent of a strided, zero-padded convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < kernel {
        return Err(Error::shape(
            "conv2d",
            format!("input {input} + 2*pad {pad} smaller than kernel {kernel}"),
        ));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Broadcast two equal-rank shapes; each axis must match or be 1 on one side.
pub fn broadcast_dims(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            op,
            format!("broadcast requires equal rank, got {:?} vs {:?}", a, b),
        ));
    }
    a.iter()
        .zip(b.iter())
        .map(|(&da, &db)| {
            if da == db || da == 1 || db == 1 {
                Ok(da.max(db))
            } else {
                Err(Error::shape(
                    op,
                    format!("incompatible dims {:?} vs {:?}", a, b),
                ))
            }
        })
        .collect()
}
