use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type the engine computes in. Training runs in `f32`; gradient
/// checks and metric oracles run in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// `(batch, channel, L, W, H)`; H is the fastest-varying axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape5(pub [usize; 5]);

impl Shape5 {
    pub const SCALAR: Shape5 = Shape5([1, 1, 1, 1, 1]);

    pub fn new(b: usize, c: usize, l: usize, w: usize, h: usize) -> Self {
        Shape5([b, c, l, w, h])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }

    pub fn channels(&self) -> usize {
        self.0[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }

    pub fn with_spatial(&self, s: [usize; 3]) -> Self {
        Shape5([self.0[0], self.0[1], s[0], s[1], s[2]])
    }

    pub fn voxels(&self) -> usize {
        self.0[2] * self.0[3] * self.0[4]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl std::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [b, c, l, w, h] = self.0;
        write!(f, "({b},{c},{l},{w},{h})")
    }
}

/// Dense 5-D array stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T: Real> Tensor5<T> {
    /// Rejects mismatched lengths and non-finite values.
    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor"));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for op outputs; finiteness is only checked in
    /// debug builds.
    pub(crate) fn from_op(op: &'static str, shape: Shape5, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite output of {op}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Shape5) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape5, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape5::SCALAR, value)
    }

    /// Builds a tensor by evaluating `f(b, c, i, j, k)` for every element.
    pub fn from_fn(shape: Shape5, mut f: impl FnMut([usize; 5]) -> T) -> Self {
        let [nb, nc, nl, nw, nh] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..nb {
            for c in 0..nc {
                for i in 0..nl {
                    for j in 0..nw {
                        for k in 0..nh {
                            data.push(f([b, c, i, j, k]));
                        }
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
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

    #[inline]
    pub fn offset(&self, idx: [usize; 5]) -> usize {
        let [_, nc, nl, nw, nh] = self.shape.0;
        (((idx[0] * nc + idx[1]) * nl + idx[2]) * nw + idx[3]) * nh + idx[4]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 5]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 5], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Contiguous (L, W, H) block of one (batch, channel) pair.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let n = self.shape.voxels();
        let start = (b * self.shape.channels() + c) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let n = self.shape.voxels();
        let start = (b * self.shape.channels() + c) * n;
        &mut self.data[start..start + n]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    pub fn reshape(mut self, shape: Shape5) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {shape}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor5<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }
}

/// Returns an error unless `a` and `b` have the same shape.
pub(crate) fn same_shape<T>(op: &'static str, a: &Tensor5<T>, b: &Tensor5<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{} vs {}", a.shape, b.shape)));
    }
    Ok(())
}
