//! Dense-array substrate with reverse-mode differentiation.
//!
//! Everything is 64-bit floats in row-major `Vec<f64>` storage. The op set is
//! exactly what the segmentation network needs: affine maps, segment-aware
//! 1-D convolutions, two normalizations, a handful of pointwise functions,
//! row gather/scatter, segmented max, and an escape hatch ([`CustomGrad`])
//! for fused kernels that bring their own backward pass.
//!
//! Values never go non-finite silently: every op checks its output and fails
//! with `NonFiniteValue` instead of letting a NaN propagate.

mod fd;
mod tape;

pub use fd::{finite_diff_check, FdReport};
pub use tape::{CustomGrad, Tape, ValueId};

use crate::error::{Error, Result};

/// Row-major n-dimensional array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn zeros(shape: &[usize]) -> DenseArray {
        DenseArray {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> DenseArray {
        DenseArray {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> DenseArray {
        DenseArray {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> DenseArray {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        DenseArray {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimensions collapsed to rows over the last axis.
    pub fn rows(&self) -> usize {
        match self.shape.last() {
            Some(&c) if c > 0 => self.data.len() / c,
            _ => 0,
        }
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> DenseArray {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub(crate) fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteValue {
                context: context.to_string(),
            })
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Matrix product of `a` `[m,k]` and `b` `[k,n]`, plain triple loop.
pub fn matmul(a: &DenseArray, b: &DenseArray, m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.numel(), m * k);
    debug_assert_eq!(b.numel(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
