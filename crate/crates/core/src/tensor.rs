//! Owned n-dimensional arrays with a gradient buffer.
//!
//! A [`Tensor`] is the storage form of parameters and inputs. Computation
//! happens on a [`Tape`](crate::autodiff::Tape): tensors are bound to a
//! tape as leaves, and gradients computed there are accumulated back into
//! [`Tensor::grad`].

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Vec<T>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} has a zero dimension"),
            ));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        let grad = vec![T::zero(); data.len()];
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad,
            requires_grad: false,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = numel(shape);
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: vec![T::zero(); n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    /// Marks the tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        &mut self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Adds `contribution` into the gradient buffer. No-op for tensors that
    /// do not require a gradient.
    pub fn accumulate_grad(&mut self, contribution: &[T]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(contribution.len(), self.grad.len());
        for (g, c) in self.grad.iter_mut().zip(contribution) {
            *g += *c;
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Serializes as the two-line text dump: shape, then row-major values.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        let shape: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&shape.join(" "));
        out.push('\n');
        for (i, v) in self.data.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", format_g17(v.to_f64_lossy()));
        }
        out.push('\n');
        out
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let shape_line = lines
            .next()
            .ok_or_else(|| Error::Data("tensor dump is empty".into()))?;
        let shape = shape_line
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|e| Error::Data(format!("bad dimension `{s}` in tensor dump: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let values = lines
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Data(format!("bad value `{s}` in tensor dump: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_f64(&shape, &values)
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_dump()).map_err(|e| Error::io(path, e))
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_dump(&text)
    }
}

/// C `%.17g` formatting.
pub fn format_g17(v: f64) -> String {
    const PRECISION: i32 = 17;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..PRECISION).contains(&exp) {
        let fixed = format!("{:.*}", (PRECISION - 1 - exp) as usize, v);
        strip_fraction_zeros(&fixed).to_string()
    } else {
        let mantissa = strip_fraction_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    }
}

fn strip_fraction_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_buffers_agree() {
        let t = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert_eq!(t.numel(), 24);
        assert_eq!(t.grad().len(), 24);
        assert!(t.grad().iter().all(|&g| g == 0.0));
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::from_vec(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn zero_grad_is_idempotent() {
        let mut t = Tensor::<f64>::zeros(&[3]).with_grad();
        t.accumulate_grad(&[1.0, -2.0, 3.0]);
        t.zero_grad();
        t.zero_grad();
        assert_eq!(t.grad(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn frozen_tensor_ignores_gradient() {
        let mut t = Tensor::<f64>::zeros(&[2]);
        t.accumulate_grad(&[1.0, 1.0]);
        assert_eq!(t.grad(), &[0.0, 0.0]);
    }

    #[test]
    fn g17_matches_c_printf() {
        assert_eq!(format_g17(0.1), "0.10000000000000001");
        assert_eq!(format_g17(1.0), "1");
        assert_eq!(format_g17(-2.5), "-2.5");
        assert_eq!(format_g17(1e-5), "1.0000000000000001e-05");
        assert_eq!(format_g17(1e20), "1e+20");
        assert_eq!(format_g17(123456.0), "123456");
        assert_eq!(format_g17(0.0001), "0.0001");
    }

    #[test]
    fn dump_round_trip_is_exact() {
        let values = [0.1, -1.0 / 3.0, 1e-300, 6.02e23, 42.0, -0.0];
        let t = Tensor::<f64>::from_vec(&[2, 3], values.to_vec()).unwrap();
        let text = t.to_dump();
        assert!(text.starts_with("2 3\n"));
        let back = Tensor::<f64>::from_dump(&text).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
