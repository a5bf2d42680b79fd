//! Dense rank-4 tensors in row-major `N, C, H, W` order.
//!
//! The element type is a type parameter: `Tensor<f32>` / `Tensor<f64>` for the
//! real-valued path, `Tensor<i64>` for integer accumulation and `Tensor<i32>`
//! for fixed-point activation codes. Nothing in this module converts between
//! element types; that only happens in [`crate::quant`] and [`crate::gf2`].

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Batch, channel, height and width counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one sample (`C·H·W`).
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn with_n(self, n: usize) -> Self {
        Self { n, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn is_live(&self) -> bool {
        self.n >= 1 && self.c >= 1 && self.h >= 1 && self.w >= 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Numeric element usable by the forward kernels.
///
/// Integer implementations round half away from zero in `from_f64`, which is
/// the same rule the quantizer uses.
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn relu(self) -> Self {
        if self > Self::ZERO {
            self
        } else {
            Self::ZERO
        }
    }
}

macro_rules! impl_float_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

macro_rules! impl_int_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0;
            const ONE: Self = 1;
            fn from_f64(v: f64) -> Self {
                v.round() as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_float_scalar!(f32);
impl_float_scalar!(f64);
impl_int_scalar!(i32);
impl_int_scalar!(i64);

/// Floating-point element usable by the backward kernels.
pub trait Real: Scalar + num_traits::Float {}
impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            bail!(
                ShapeMismatch,
                "shape {} needs {} elements, got {}",
                shape,
                shape.numel(),
                data.len()
            );
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// One sample's `C·H·W` elements.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let len = self.shape.plane_len();
        let start = (n * self.shape.c + c) * len;
        &self.data[start..start + len]
    }

    /// Copies samples `[start, end)` into a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor<T> {
        let len = self.shape.sample_len();
        Tensor {
            shape: self.shape.with_n(end - start),
            data: self.data[start * len..end * len].to_vec(),
        }
    }

    /// Gathers the listed samples, in order, into a new tensor.
    pub fn gather_batch(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.shape.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor {
            shape: self.shape.with_n(indices.len()),
            data,
        }
    }

    pub fn map<U, F: Fn(T) -> U>(&self, f: F) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }
}

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::default())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.to_f64()))
    }
}

/// Concatenates along the channel axis: `a` fills channels `[0, Ca)` and `b`
/// fills `[Ca, Ca+Cb)`.
pub fn concat_channels<T: Copy>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    concat_many(&[a, b])
}

pub fn concat_many<T: Copy>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        bail!(InvalidArgument, "concat of zero tensors");
    };
    let s0 = first.shape();
    for p in &parts[1..] {
        let s = p.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            bail!(ShapeMismatch, "concat {} with {}", s0, s);
        }
    }
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let shape = s0.with_c(c);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..s0.n {
        for p in parts {
            data.extend_from_slice(p.sample(n));
        }
    }
    Ok(Tensor { shape, data })
}

/// Splits channels `[0, at)` from `[at, C)`; the inverse of [`concat_channels`].
pub fn split_channels<T: Copy>(x: &Tensor<T>, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if at == 0 || at >= s.c {
        bail!(OutOfRange, "split point {} must lie in (0, {})", at, s.c);
    }
    let mut parts = split_many(x, &[at, s.c - at])?;
    let b = parts.pop().expect("two parts");
    let a = parts.pop().expect("two parts");
    Ok((a, b))
}

/// Splits channels into consecutive groups of the given sizes.
pub fn split_many<T: Copy>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    if sizes.iter().sum::<usize>() != s.c {
        bail!(ShapeMismatch, "split sizes {:?} do not sum to {} channels", sizes, s.c);
    }
    let plane = s.plane_len();
    let mut out: Vec<Vec<T>> = sizes
        .iter()
        .map(|&c| Vec::with_capacity(s.n * c * plane))
        .collect();
    for n in 0..s.n {
        let sample = x.sample(n);
        let mut start = 0;
        for (dst, &c) in out.iter_mut().zip(sizes) {
            dst.extend_from_slice(&sample[start * plane..(start + c) * plane]);
            start += c;
        }
    }
    Ok(out
        .into_iter()
        .zip(sizes)
        .map(|(data, &c)| Tensor {
            shape: s.with_c(c),
            data,
        })
        .collect())
}
