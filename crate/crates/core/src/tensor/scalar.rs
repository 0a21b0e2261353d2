use std::borrow::Cow;
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Element type of a [`DiffTensor`](super::DiffTensor).
///
/// Training runs in `f32`; gradient checks run the identical graph in `f64`.
/// All reductions widen to `f64` regardless of the storage type.
pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn widen(self) -> f64;
    fn narrow(x: f64) -> Self;
    fn is_finite(self) -> bool;

    /// Views a slice as `f64`, copying only when the storage type differs.
    fn widen_slice(xs: &[Self]) -> Cow<'_, [f64]>;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline]
    fn narrow(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    fn widen_slice(xs: &[Self]) -> Cow<'_, [f64]> {
        Cow::Owned(xs.iter().map(|&x| x as f64).collect())
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn widen(self) -> f64 {
        self
    }

    #[inline]
    fn narrow(x: f64) -> Self {
        x
    }

    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn widen_slice(xs: &[Self]) -> Cow<'_, [f64]> {
        Cow::Borrowed(xs)
    }
}
