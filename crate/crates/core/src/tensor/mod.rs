//! Dense tensors with a tape-based reverse-mode autodiff engine.
//!
//! Images are laid out `N, C, H, W`, row-major. Linear layers are expressed
//! as 1x1 convolutions over channel-major data so attention never needs a
//! transpose copy.

mod adam;
mod conv;
mod gradcheck;
mod graph;
mod params;

pub use adam::{Adam, AdamConfig, REFERENCE_LR};
pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions};
pub use graph::{Grads, Graph, Var};
pub use params::{Ctx, Param, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| S::lit(rng.normal() * std)).collect(),
        }
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| S::lit(rng.uniform_range(lo, hi))).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::lit(self.data.len().max(1) as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-level equality; distinguishes `-0.0` from `0.0`.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Items `start..start+len` along axis 0.
    pub fn slice0(&self, start: usize, len: usize) -> Result<Self> {
        if self.shape.is_empty() || start + len > self.shape[0] {
            return Err(Error::shape("slice0", &self.shape, &[start, len]));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        })
    }

    /// Items at `idx` along axis 0, in that order.
    pub fn gather0(&self, idx: &[usize]) -> Result<Self> {
        let n = self.shape.first().copied().unwrap_or(0);
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= n {
                return Err(Error::shape("gather0", &self.shape, &[i]));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self { shape, data })
    }

    /// Concatenate along axis 0.
    pub fn stack0(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("stack0 of nothing"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape("stack0", &first.shape, &p.shape));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }

    /// Concatenate along axis 1 of `(A, C, rest..)` tensors.
    pub fn concat1(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat1 of nothing"))?;
        let outer = first.shape[0];
        let inner: usize = first.shape[2..].iter().product();
        let mut c_total = 0;
        for p in parts {
            if p.shape.len() != first.shape.len() || p.shape[0] != outer || p.shape[2..] != first.shape[2..] {
                return Err(Error::shape("concat1", &first.shape, &p.shape));
            }
            c_total += p.shape[1];
        }
        let mut data = Vec::with_capacity(outer * c_total * inner);
        for a in 0..outer {
            for p in parts {
                let blk = p.shape[1] * inner;
                data.extend_from_slice(&p.data[a * blk..(a + 1) * blk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = c_total;
        Ok(Self { shape, data })
    }

    /// Channels `start..start+len` along axis 1.
    pub fn narrow1(&self, start: usize, len: usize) -> Result<Self> {
        if self.shape.len() < 2 || start + len > self.shape[1] {
            return Err(Error::shape("narrow1", &self.shape, &[start, len]));
        }
        let outer = self.shape[0];
        let c = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for a in 0..outer {
            let base = a * c * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Ok(Self { shape, data })
    }
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
