//! Dense n-dimensional `f64` array, the universal value type of the crate.
//!
//! Row-major layout. Image signals are `[c, h, w]` (or `[b, c, h, w]`
//! batched), graph signals `[n, nf]` (or `[b, n, nf]`). All numerics are
//! 64-bit; the verification tolerances in the test suites are not reachable
//! in single precision.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn check_shape(&self, expect: &[usize], context: &str) -> Result<()> {
        if self.shape != expect {
            return Err(Error::ShapeMismatch(format!(
                "{context}: expected {:?}, got {:?}",
                expect, self.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert!(self.same_shape(other), "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// self += c * other
    pub fn add_scaled_inplace(&mut self, c: f64, other: &Tensor) {
        assert!(self.same_shape(other), "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Standard basis tensor: all zeros except a 1 at flat index `i`.
    pub fn basis(shape: &[usize], i: usize) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data[i] = 1.0;
        t
    }
}

/// Circularly shifts an image tensor `[c, h, w]` by (dy, dx).
pub fn circular_shift(x: &Tensor, dy: i64, dx: i64) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 3, "circular_shift expects [c, h, w]");
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(s);
    let xd = x.data();
    let od = out.data_mut();
    for ci in 0..c {
        for y in 0..h {
            let sy = ((y as i64 - dy).rem_euclid(h as i64)) as usize;
            for xw in 0..w {
                let sx = ((xw as i64 - dx).rem_euclid(w as i64)) as usize;
                od[(ci * h + y) * w + xw] = xd[(ci * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Permutes the node axis of a graph tensor `[n, nf]`: output row `i` is
/// input row `perm[i]`.
pub fn permute_nodes(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 2, "permute_nodes expects [n, nf]");
    let (n, nf) = (s[0], s[1]);
    assert_eq!(perm.len(), n);
    let mut out = Tensor::zeros(s);
    for i in 0..n {
        let src = perm[i];
        out.data_mut()[i * nf..(i + 1) * nf].copy_from_slice(&x.data()[src * nf..(src + 1) * nf]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_ops() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::filled(&[2, 2], 0.5);
        assert_eq!(a.add(&b).data(), &[1.5, 2.5, 3.5, 4.5]);
        assert_eq!(a.mul(&b).sum(), 5.0);
        assert_eq!(a.linf_norm(), 4.0);
        assert!((a.l2_norm() - 30.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn shift_round_trip() {
        let mut rng = Rng::seeded(1);
        let x = Tensor::randn(&mut rng, &[2, 4, 5], 1.0);
        let y = circular_shift(&circular_shift(&x, 3, 2), -3, -2);
        assert_eq!(x, y);
        // full wrap is identity
        assert_eq!(circular_shift(&x, 4, 5), x);
    }

    #[test]
    fn node_permutation_round_trip() {
        let mut rng = Rng::seeded(2);
        let x = Tensor::randn(&mut rng, &[5, 3], 1.0);
        let perm = rng.permutation(5);
        let mut inv = vec![0usize; 5];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        assert_eq!(permute_nodes(&permute_nodes(&x, &perm), &inv), x);
    }
}
