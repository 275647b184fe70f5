//! Dense tensors and the scalar abstraction shared by the 32-bit training path
//! and the 64-bit gradient-checking path.
//!
//! Transcendental functions go through `libm` rather than the platform math
//! library so that every forward pass is reproducible bit-for-bit on any host.
//! The entropy coder depends on encoder and decoder agreeing exactly.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

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
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn erfc(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn round_half_even(self) -> Self;

    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }

    fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        libm::expf(self)
    }
    fn ln(self) -> Self {
        libm::logf(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrtf(self)
    }
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }
    fn powf(self, e: Self) -> Self {
        libm::powf(self, e)
    }
    fn abs(self) -> Self {
        libm::fabsf(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    fn erfc(self) -> Self {
        libm::erfc(self)
    }
    fn powf(self, e: Self) -> Self {
        libm::pow(self, e)
    }
    fn abs(self) -> Self {
        libm::fabs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }
}

/// A dense, row-major tensor. Images use `[batch, channel, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
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

    /// Interprets the tensor as `[n, c, h, w]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a 4-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        let mut acc = T::ZERO;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies out the `[n, c, y0..y0+h, x0..x0+w]` window of a 4-d tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (n, c, sh, sw) = self.dims4()?;
        if y0 + h > sh || x0 + w > sw {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {sh}x{sw}"
            )));
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            let base = plane * sh * sw;
            for y in y0..y0 + h {
                let row = base + y * sw + x0;
                data.extend_from_slice(&self.data[row..row + w]);
            }
        }
        Tensor::new(&[n, c, h, w], data)
    }

    /// Reflect-pads the bottom and right edges of a 4-d tensor up to `h x w`.
    pub fn reflect_pad_to(&self, h: usize, w: usize) -> Result<Self> {
        let (n, c, sh, sw) = self.dims4()?;
        if h < sh || w < sw {
            return Err(Error::shape(format!(
                "cannot pad {sh}x{sw} down to {h}x{w}"
            )));
        }
        if h - sh >= sh || w - sw >= sw {
            return Err(Error::shape(format!(
                "reflect padding from {sh}x{sw} to {h}x{w} exceeds the image extent"
            )));
        }
        let reflect = |i: usize, size: usize| -> usize {
            if i < size {
                i
            } else {
                2 * (size - 1) - i
            }
        };
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            let base = plane * sh * sw;
            for y in 0..h {
                let sy = reflect(y, sh);
                for x in 0..w {
                    data.push(self.data[base + sy * sw + reflect(x, sw)]);
                }
            }
        }
        Tensor::new(&[n, c, h, w], data)
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn reflect_pad_then_crop_is_identity() {
        let t = Tensor::<f32>::from_fn(&[1, 2, 5, 6], |i| i as f32);
        let padded = t.reflect_pad_to(8, 8).unwrap();
        assert_eq!(padded.shape(), &[1, 2, 8, 8]);
        // row 5 mirrors row 3
        assert_eq!(padded.data()[5 * 8], t.data()[3 * 6]);
        assert_eq!(padded.crop(0, 0, 5, 6).unwrap(), t);
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(2.5f32.round_half_even(), 2.0);
        assert_eq!((-0.5f64).round_half_even(), -0.0);
        assert_eq!(1.5f64.round_half_even(), 2.0);
    }
}
