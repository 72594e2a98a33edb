use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Floating-point element type for tensors. Runs use one kind throughout:
/// f32 for training pipelines, f64 for verification and curvature probes.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Default
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
    fn is_finite_s(self) -> bool;
    fn abs_s(self) -> Self;
    fn sqrt_s(self) -> Self;
    fn exp_s(self) -> Self;
    fn ln_s(self) -> Self;
    fn max_s(self, o: Self) -> Self;
    fn min_s(self, o: Self) -> Self;
    fn signum_s(self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
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
            fn is_finite_s(self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn abs_s(self) -> Self {
                self.abs()
            }
            #[inline]
            fn sqrt_s(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn exp_s(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln_s(self) -> Self {
                self.ln()
            }
            #[inline]
            fn max_s(self, o: Self) -> Self {
                if self > o {
                    self
                } else {
                    o
                }
            }
            #[inline]
            fn min_s(self, o: Self) -> Self {
                if self < o {
                    self
                } else {
                    o
                }
            }
            #[inline]
            fn signum_s(self) -> Self {
                if self > 0.0 {
                    1.0
                } else if self < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense n-dimensional array, contiguous row-major storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new".into(),
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "reshape".into(),
                expected: shape.to_vec(),
                got: self.shape.clone(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                context: "zip".into(),
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn fill(&mut self, v: S) {
        self.data.fill(v);
    }

    /// Accumulates `c * other` into self. Shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor<S>, c: S) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: S) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn dot(&self, other: &Tensor<S>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_s())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Flat offset for a 2-d index.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        i * self.shape[1] + j
    }

    /// Flat offset for a 4-d index (NCHW layout).
    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    /// Extracts row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// View of example `n` of a batch tensor (any rank with leading batch dim).
    pub fn example(&self, n: usize) -> &[S] {
        let stride: usize = self.shape[1..].iter().product();
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn example_mut(&mut self, n: usize) -> &mut [S] {
        let stride: usize = self.shape[1..].iter().product();
        &mut self.data[n * stride..(n + 1) * stride]
    }

    /// Stacks per-example slices back into a batch tensor.
    pub fn stack(shape_per_example: &[usize], examples: &[&[S]]) -> Result<Tensor<S>> {
        let stride: usize = shape_per_example.iter().product();
        let mut data = Vec::with_capacity(stride * examples.len());
        for ex in examples {
            if ex.len() != stride {
                return Err(Error::ShapeMismatch {
                    context: "stack".into(),
                    expected: shape_per_example.to_vec(),
                    got: vec![ex.len()],
                });
            }
            data.extend_from_slice(ex);
        }
        let mut shape = vec![examples.len()];
        shape.extend_from_slice(shape_per_example);
        Tensor::new(&shape, data)
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}[", self.shape)?;
        let n = self.data.len().min(8);
        for (i, v) in self.data[..n].iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > n {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

/// Bitwise equality, distinguishing -0.0 from 0.0 and treating NaN as equal to
/// itself. Used by determinism and degeneracy tests.
pub fn bit_equal<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0f32; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0f32; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn norms_accumulate_in_f64() {
        let t = Tensor::from_vec(vec![3.0f32, 4.0]);
        assert_eq!(t.l2_norm(), 5.0);
        assert_eq!(t.l1_norm(), 7.0);
        assert_eq!(t.linf_norm(), 4.0);
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.data()[t.at2(1, 2)], 5.0);
        let u = Tensor::new(&[1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        assert_eq!(u.data()[u.at4(0, 1, 1, 0)], 6.0);
    }

    #[test]
    fn cast_round_trip() {
        let t = Tensor::from_vec(vec![1.5f32, -2.25]);
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert!(bit_equal(&t, &back));
    }
}
