//! Dense 4-D tensors in batch, channel, height, width order.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Scalar storage type. Reductions always accumulate in `f64`.
pub trait Element:
    Copy + Default + PartialEq + PartialOrd + Debug + Send + Sync + 'static
{
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    /// Element count, or `None` if it does not fit in `usize`.
    pub fn checked_numel(&self) -> Option<usize> {
        self.dims()
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Shape { channels, ..*self }
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from(d: (usize, usize, usize, usize)) -> Self {
        Shape::new(d.0, d.1, d.2, d.3)
    }
}

/// Row-major 4-D tensor with an optional gradient buffer of the same length.
///
/// The shape is fixed at construction; [`Tensor::reshape`] returns a new value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Shape>, fill: T) -> Result<Self> {
        let shape = shape.into();
        let n = shape
            .checked_numel()
            .ok_or(Error::CapacityOverflow(shape.dims()))?;
        Ok(Tensor {
            shape,
            data: vec![fill; n],
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![T::ZERO; shape.numel()],
            grad: None,
        }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected = shape
            .checked_numel()
            .ok_or(Error::CapacityOverflow(shape.dims()))?;
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                shape: shape.dims(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel()).map(&mut f).collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// The `h * w` plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.checked_numel() != Some(self.len()) {
            return Err(Error::LengthMismatch {
                shape: shape.dims(),
                expected: shape.checked_numel().unwrap_or(usize::MAX),
                actual: self.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            grad: self.grad.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }

    /// Copy of channels `start..start + count`.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Self> {
        let s = self.shape;
        if start + count > s.channels {
            return Err(Error::ChannelMismatch {
                op: "channel_slice",
                expected: s.channels,
                actual: start + count,
            });
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.batch * count * p);
        for n in 0..s.batch {
            let base = (n * s.channels + start) * p;
            data.extend_from_slice(&self.data[base..base + count * p]);
        }
        Ok(Tensor {
            shape: s.with_channels(count),
            data,
            grad: None,
        })
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::ZERO),
            None => self.grad = Some(vec![T::ZERO; self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// In-place `grad += delta`, allocating a zero buffer on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::LengthMismatch {
                shape: self.shape.dims(),
                expected: self.data.len(),
                actual: delta.len(),
            });
        }
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::ZERO; self.data.len()]);
        for (g, d) in g.iter_mut().zip(delta) {
            *g = T::from_f64(g.to_f64() + d.to_f64());
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fill() {
        let t = Tensor::new((1, 1, 2, 2), 0.0f32).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        assert!(t.grad().is_none());
    }

    #[test]
    fn constant_fill() {
        let t = Tensor::new((2, 3, 4, 4), 1.5f32).unwrap();
        assert_eq!(t.len(), 96);
        assert!(t.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn degenerate_dim_is_empty() {
        let t = Tensor::new((0, 3, 4, 4), 1.0f32).unwrap();
        assert_eq!(t.len(), 0);
        assert!(t.is_empty());
        assert_eq!(t.channel_slice(1, 2).unwrap().len(), 0);
    }

    #[test]
    fn overflow_is_reported() {
        let err = Tensor::new((usize::MAX, 2, 2, 2), 0.0f32).unwrap_err();
        assert!(matches!(err, Error::CapacityOverflow(_)));
    }

    #[test]
    fn reshape_keeps_data_and_original() {
        let t = Tensor::from_fn((1, 2, 2, 3), |i| i as f32);
        let r = t.reshape((1, 12, 1, 1)).unwrap();
        assert_eq!(r.data(), t.data());
        assert_eq!(t.shape(), Shape::new(1, 2, 2, 3));
        assert!(t.reshape((1, 5, 1, 1)).is_err());
    }

    #[test]
    fn grad_accumulates_in_place() {
        let mut t = Tensor::new((1, 1, 1, 3), 0.0f32).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
        assert_eq!(t.data(), &[0.0; 3]);
    }

    #[test]
    fn channel_slice_picks_planes() {
        let t = Tensor::from_fn((2, 3, 1, 2), |i| i as f32);
        let s = t.channel_slice(1, 2).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 1, 2));
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }
}
