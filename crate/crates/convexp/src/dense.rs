//! Brute-force dense reference implementations.
//!
//! Everything here exists to verify the implicit operators: equivalent
//! matrices are materialized by basis probing, exponentials computed by
//! scaling-and-squaring, determinants by LU. None of it is meant to scale;
//! a hard element cap keeps the O(d²) memory honest.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gemm;
use crate::linop::LinearOperator;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default cap on the flattened dimension of an equivalent matrix.
pub const DIMENSION_CAP: usize = 4096;

/// Row-major dense matrix used by the verification oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> DenseMatrix {
        assert_eq!(rows * cols, data.len());
        DenseMatrix { rows, cols, data }
    }

    pub fn diagonal(values: &[f64]) -> DenseMatrix {
        let n = values.len();
        let mut m = DenseMatrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix {
            rows: self.cols,
            cols: self.rows,
            data: gemm::transpose(&self.data, self.rows, self.cols),
        }
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        DenseMatrix {
            rows: self.rows,
            cols: other.cols,
            data: gemm::matmul(&self.data, &other.data, self.rows, self.cols, other.cols),
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "mul_vec dimension mismatch");
        gemm::matmul(&self.data, x, self.rows, self.cols, 1)
    }

    pub fn scale(&self, c: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        assert!(self.is_square());
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    /// Induced 1-norm (max absolute column sum).
    pub fn one_norm(&self) -> f64 {
        let mut best = 0.0f64;
        for j in 0..self.cols {
            let s: f64 = (0..self.rows).map(|i| self.get(i, j).abs()).sum();
            best = best.max(s);
        }
        best
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Spectral norm estimate by power iteration on MᵀM; test oracle only.
    pub fn two_norm_estimate(&self, iters: usize, rng: &mut Rng) -> f64 {
        let mut v: Vec<f64> = (0..self.cols).map(|_| rng.normal()).collect();
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let n0 = norm(&v);
        if n0 == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|a| *a /= n0);
        let mt = self.transpose();
        let mut sigma = 0.0;
        for _ in 0..iters {
            let mv = self.mul_vec(&v);
            sigma = norm(&mv);
            let mtmv = mt.mul_vec(&mv);
            let n = norm(&mtmv);
            if n < 1e-300 {
                return 0.0;
            }
            v = mtmv.into_iter().map(|a| a / n).collect();
        }
        sigma
    }
}

/// Materializes the equivalent matrix of a linear operator by applying it to
/// every standard basis tensor; column j is `op` applied to basis j.
pub fn build_equivalent_matrix(op: &dyn LinearOperator, cap: usize) -> Result<DenseMatrix> {
    let shape = op.input_shape().to_vec();
    let d: usize = shape.iter().product();
    if d > cap {
        return Err(Error::DimensionCap { dims: d, cap });
    }
    let mut m = DenseMatrix::zeros(d, d);
    for j in 0..d {
        let e = Tensor::basis(&shape, j);
        let col = op.apply(&e)?;
        if col.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "operator is not dimensionality-preserving: {:?} -> {:?}",
                shape,
                col.shape()
            )));
        }
        for (i, &v) in col.data().iter().enumerate() {
            m.set(i, j, v);
        }
    }
    Ok(m)
}

/// Matrix exponential by scaling-and-squaring with a truncated Taylor series.
///
/// Scales by 2^s so the 1-norm drops to 0.5, runs the series to 18 terms
/// (stopping early once a term falls below 1e-16 of the running sum), then
/// squares s times. At norm 0.5 the term after the 18th is below 1e-22 of
/// the sum, far inside every tolerance used by the test suites.
pub fn dense_expm(m: &DenseMatrix) -> DenseMatrix {
    assert!(m.is_square(), "dense_expm requires a square matrix");
    let n = m.rows;
    let norm = m.one_norm();
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m.scale(0.5f64.powi(s as i32));

    let mut result = DenseMatrix::identity(n);
    let mut term = DenseMatrix::identity(n);
    for i in 1..=18u32 {
        term = term.matmul(&scaled).scale(1.0 / i as f64);
        result = result.add(&term);
        if term.max_abs() <= 1e-16 * result.max_abs() {
            break;
        }
    }
    for _ in 0..s {
        result = result.matmul(&result);
    }
    result
}

/// log |det M| with the sign of the determinant reported separately.
///
/// Partial-pivot LU; a pivot below 1e-12 is treated as singular.
pub fn logdet_via_lu(m: &DenseMatrix) -> Result<(f64, f64)> {
    if !m.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "logdet requires square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    let n = m.rows;
    let mut a = m.data.clone();
    let mut sign = 1.0f64;
    let mut log_abs = 0.0f64;
    for k in 0..n {
        // pick pivot
        let mut piv = k;
        let mut best = a[k * n + k].abs();
        for i in (k + 1)..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best < 1e-12 {
            return Err(Error::Singular(format!(
                "pivot {best:.3e} below tolerance at column {k}"
            )));
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            sign = -sign;
        }
        let pivot = a[k * n + k];
        if pivot < 0.0 {
            sign = -sign;
        }
        log_abs += pivot.abs().ln();
        for i in (k + 1)..n {
            let f = a[i * n + k] / pivot;
            a[i * n + k] = f;
            for j in (k + 1)..n {
                a[i * n + j] -= f * a[k * n + j];
            }
        }
    }
    Ok((log_abs, sign))
}

/// Solves M x = b by LU with partial pivoting.
pub fn solve(m: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    assert!(m.is_square());
    assert_eq!(m.rows, b.len());
    let n = m.rows;
    let mut a = m.data.clone();
    let mut x = b.to_vec();
    for k in 0..n {
        let mut piv = k;
        let mut best = a[k * n + k].abs();
        for i in (k + 1)..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best < 1e-12 {
            return Err(Error::Singular(format!(
                "pivot {best:.3e} below tolerance at column {k}"
            )));
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            x.swap(k, piv);
        }
        let pivot = a[k * n + k];
        for i in (k + 1)..n {
            let f = a[i * n + k] / pivot;
            if f == 0.0 {
                continue;
            }
            for j in (k + 1)..n {
                a[i * n + j] -= f * a[k * n + j];
            }
            x[i] -= f * x[k];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s -= a[i * n + j] * x[j];
        }
        x[i] = s / a[i * n + i];
    }
    Ok(x)
}

/// Explicit inverse via LU solves against the identity columns.
pub fn invert(m: &DenseMatrix) -> Result<DenseMatrix> {
    assert!(m.is_square());
    let n = m.rows;
    let mut inv = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = solve(m, &e)?;
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
    }
    Ok(inv)
}

impl DenseMatrix {
    /// Writes row-major CSV with shortest round-trip float formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", self.get(i, j));
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<DenseMatrix> {
        let text = std::fs::read_to_string(path)?;
        let mut rows = 0usize;
        let mut cols = None;
        let mut data = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let values: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad CSV value {s:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            match cols {
                None => cols = Some(values.len()),
                Some(c) if c != values.len() => {
                    return Err(Error::Config(format!(
                        "ragged CSV: row {rows} has {} values, expected {c}",
                        values.len()
                    )))
                }
                _ => {}
            }
            data.extend(values);
            rows += 1;
        }
        let cols = cols.ok_or_else(|| Error::Config("empty CSV".into()))?;
        Ok(DenseMatrix::from_vec(rows, cols, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_with_two_norm(rng: &mut Rng, n: usize, target: f64) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n * n {
            m.data[i] = rng.normal();
        }
        let sigma = m.two_norm_estimate(200, rng);
        m.scale(target / sigma)
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let z = DenseMatrix::zeros(5, 5);
        assert_eq!(dense_expm(&z), DenseMatrix::identity(5));
    }

    #[test]
    fn expm_of_diagonal() {
        let a = [1.0, -1.0, 0.5];
        let e = dense_expm(&DenseMatrix::diagonal(&a));
        let expect = DenseMatrix::diagonal(&[a[0].exp(), a[1].exp(), a[2].exp()]);
        assert!(e.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn expm_inverse_identity() {
        let mut rng = Rng::seeded(11);
        let m = random_with_two_norm(&mut rng, 8, 2.0);
        let prod = dense_expm(&m).matmul(&dense_expm(&m.scale(-1.0)));
        assert!(prod.max_abs_diff(&DenseMatrix::identity(8)) < 1e-10);
    }

    #[test]
    fn expm_roundtrip_sweep() {
        let mut rng = Rng::seeded(12);
        for _ in 0..20 {
            let m = random_with_two_norm(&mut rng, 6, 1.0);
            let prod = dense_expm(&m).matmul(&dense_expm(&m.scale(-1.0)));
            assert!(prod.max_abs_diff(&DenseMatrix::identity(6)) < 1e-9);
        }
    }

    #[test]
    fn logdet_identity_and_diag() {
        let (l, s) = logdet_via_lu(&DenseMatrix::identity(4)).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(s, 1.0);
        let (l, s) = logdet_via_lu(&DenseMatrix::diagonal(&[2.0, 3.0])).unwrap();
        assert!((l - 6.0f64.ln()).abs() < 1e-15);
        assert_eq!(s, 1.0);
        let (_, s) = logdet_via_lu(&DenseMatrix::diagonal(&[-2.0, 3.0])).unwrap();
        assert_eq!(s, -1.0);
    }

    #[test]
    fn logdet_rejects_singular() {
        let m = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(logdet_via_lu(&m), Err(Error::Singular(_))));
    }

    #[test]
    fn logdet_of_expm_equals_trace() {
        let mut rng = Rng::seeded(13);
        for _ in 0..20 {
            let m = random_with_two_norm(&mut rng, 7, 1.0);
            let (l, s) = logdet_via_lu(&dense_expm(&m)).unwrap();
            assert_eq!(s, 1.0);
            assert!(
                (l - m.trace()).abs() < 1e-8,
                "logdet {l} vs trace {}",
                m.trace()
            );
        }
    }

    #[test]
    fn solve_and_invert() {
        let mut rng = Rng::seeded(14);
        let m = random_with_two_norm(&mut rng, 5, 1.5);
        let m = m.add(&DenseMatrix::identity(5).scale(2.0));
        let b: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let x = solve(&m, &b).unwrap();
        let back = m.mul_vec(&x);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
        let inv = invert(&m).unwrap();
        assert!(m.matmul(&inv).max_abs_diff(&DenseMatrix::identity(5)) < 1e-10);
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join("convexp_dense_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let mut rng = Rng::seeded(15);
        let m = random_with_two_norm(&mut rng, 4, 1.0);
        m.write_csv(&path).unwrap();
        let back = DenseMatrix::read_csv(&path).unwrap();
        assert_eq!(m, back);
    }
}
