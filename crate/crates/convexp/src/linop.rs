//! Dimensionality-preserving linear operators.
//!
//! A [`LinearOperator`] exposes application, transpose application and (when
//! it exists) a closed-form trace. The concrete operators are the 2-d
//! convolution, the linear graph convolution layer, and the Householder
//! channel map; spectral normalization estimates the operator norm by power
//! iteration so the exponential series can be kept contractive.

use crate::convops::{self, Padding};
use crate::error::{Error, Result};
use crate::gemm;
use crate::tensor::Tensor;

pub trait LinearOperator {
    /// Per-sample input (= output) shape.
    fn input_shape(&self) -> &[usize];

    fn apply(&self, x: &Tensor) -> Result<Tensor>;

    /// Applies the transpose of the equivalent matrix: ⟨op(x), y⟩ = ⟨x, opᵀ(y)⟩.
    fn transpose_apply(&self, y: &Tensor) -> Result<Tensor>;

    /// Closed-form trace of the equivalent matrix, when one exists.
    fn trace(&self) -> Result<f64>;
}

/// Trace of an operator's equivalent matrix; exact, no sampling.
pub fn operator_trace(op: &dyn LinearOperator) -> Result<f64> {
    op.trace()
}

// ---------------------------------------------------------------------------
// 2-d convolution
// ---------------------------------------------------------------------------

/// Convolution kernel with equal input/output channels and odd spatial dims,
/// so the map preserves dimensionality and has a unique center tap.
#[derive(Clone, Debug)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub padding: Padding,
}

impl ConvKernel {
    pub fn new(weights: Tensor, padding: Padding) -> Result<ConvKernel> {
        let s = weights.shape();
        if s.len() != 4 || s[0] != s[1] {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel must be [c,c,kh,kw], got {s:?}"
            )));
        }
        if s[2] % 2 == 0 || s[3] % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "kernel spatial dims must be odd, got {}x{}",
                s[2], s[3]
            )));
        }
        Ok(ConvKernel { weights, padding })
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Sum of the center taps of the diagonal channel slices.
    pub fn center_diagonal_sum(&self) -> f64 {
        let s = self.weights.shape();
        let (c, kh, kw) = (s[0], s[2], s[3]);
        let (my, mx) = (kh / 2, kw / 2);
        (0..c)
            .map(|ci| self.weights.data()[((ci * c + ci) * kh + my) * kw + mx])
            .sum()
    }
}

pub fn conv2d_apply(kernel: &ConvKernel, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[0] != kernel.channels() {
        return Err(Error::ShapeMismatch(format!(
            "conv input must be [c,h,w] with c = {}, got {s:?}",
            kernel.channels()
        )));
    }
    let lifted = x.reshaped(&[1, s[0], s[1], s[2]]);
    let y = convops::conv2d_batch(&lifted, &kernel.weights, kernel.padding);
    Ok(y.reshaped(s))
}

pub fn conv2d_transpose_apply(kernel: &ConvKernel, y: &Tensor) -> Result<Tensor> {
    let s = y.shape();
    if s.len() != 3 || s[0] != kernel.channels() {
        return Err(Error::ShapeMismatch(format!(
            "conv cotangent must be [c,h,w] with c = {}, got {s:?}",
            kernel.channels()
        )));
    }
    let lifted = y.reshaped(&[1, s[0], s[1], s[2]]);
    let x = convops::conv2d_transpose_batch(&lifted, &kernel.weights, kernel.padding);
    Ok(x.reshaped(s))
}

/// A [`ConvKernel`] bound to a concrete signal shape.
#[derive(Clone, Debug)]
pub struct ConvOp {
    pub kernel: ConvKernel,
    shape: Vec<usize>,
}

impl ConvOp {
    pub fn new(kernel: ConvKernel, shape: &[usize]) -> Result<ConvOp> {
        if shape.len() != 3 || shape[0] != kernel.channels() {
            return Err(Error::ShapeMismatch(format!(
                "conv operator shape must be [c,h,w] with c = {}, got {shape:?}",
                kernel.channels()
            )));
        }
        Ok(ConvOp {
            kernel,
            shape: shape.to_vec(),
        })
    }
}

impl LinearOperator for ConvOp {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.check_shape(&self.shape, "conv apply")?;
        conv2d_apply(&self.kernel, x)
    }

    fn transpose_apply(&self, y: &Tensor) -> Result<Tensor> {
        y.check_shape(&self.shape, "conv transpose apply")?;
        conv2d_transpose_apply(&self.kernel, y)
    }

    fn trace(&self) -> Result<f64> {
        // h·w · Σ_c k[c,c,my,mx]; each diagonal entry of the equivalent
        // matrix is the center tap of the matching channel slice.
        let (h, w) = (self.shape[1], self.shape[2]);
        Ok((h * w) as f64 * self.kernel.center_diagonal_sum())
    }
}

// ---------------------------------------------------------------------------
// Linear graph convolution
// ---------------------------------------------------------------------------

/// Free parameters of the linear graph convolutional layer.
#[derive(Clone, Debug)]
pub struct GclParams {
    pub theta0: Tensor,
    pub theta1: Tensor,
}

impl GclParams {
    pub fn new(theta0: Tensor, theta1: Tensor) -> Result<GclParams> {
        let s0 = theta0.shape();
        if s0.len() != 2 || s0[0] != s0[1] || theta1.shape() != s0 {
            return Err(Error::ShapeMismatch(format!(
                "gcl params must be matching square matrices, got {:?} and {:?}",
                s0,
                theta1.shape()
            )));
        }
        Ok(GclParams { theta0, theta1 })
    }

    pub fn nf(&self) -> usize {
        self.theta0.shape()[0]
    }
}

/// One graph sample: node features plus symmetric adjacency with zero
/// diagonal.
#[derive(Clone, Debug)]
pub struct GraphInstance {
    pub node_features: Tensor,
    pub adjacency: Tensor,
    pub degree: Vec<f64>,
}

impl GraphInstance {
    pub fn new(node_features: Tensor, adjacency: Tensor) -> Result<GraphInstance> {
        let fs = node_features.shape();
        if fs.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "node features must be [n,nf], got {fs:?}"
            )));
        }
        let n = fs[0];
        adjacency.check_shape(&[n, n], "adjacency")?;
        let a = adjacency.data();
        for i in 0..n {
            if a[i * n + i] != 0.0 {
                return Err(Error::Config(format!("adjacency diagonal not zero at {i}")));
            }
            for j in 0..n {
                if a[i * n + j] < 0.0 {
                    return Err(Error::Config(format!("adjacency negative at ({i},{j})")));
                }
                if (a[i * n + j] - a[j * n + i]).abs() > 1e-12 {
                    return Err(Error::Config(format!("adjacency asymmetric at ({i},{j})")));
                }
            }
        }
        let degree = (0..n)
            .map(|i| (0..n).map(|j| a[i * n + j]).sum())
            .collect();
        Ok(GraphInstance {
            node_features,
            adjacency,
            degree,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_features.shape()[0]
    }

    pub fn num_features(&self) -> usize {
        self.node_features.shape()[1]
    }

    /// D^{-1/2} A D^{-1/2}; rows/columns of isolated nodes are zero.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.num_nodes();
        let dinv: Vec<f64> = self
            .degree
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        let mut ahat = Tensor::zeros(&[n, n]);
        let a = self.adjacency.data();
        let out = ahat.data_mut();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = dinv[i] * a[i * n + j] * dinv[j];
            }
        }
        ahat
    }

    /// Fully connected graph with unit edge weights.
    pub fn fully_connected(node_features: Tensor) -> GraphInstance {
        let n = node_features.shape()[0];
        let mut adj = Tensor::filled(&[n, n], 1.0);
        for i in 0..n {
            adj.data_mut()[i * n + i] = 0.0;
        }
        GraphInstance::new(node_features, adj).expect("fully connected adjacency is valid")
    }
}

/// I·X·θ0 + D^{-1/2} A D^{-1/2}·X·θ1
pub fn gcl_apply(params: &GclParams, g: &GraphInstance) -> Result<Tensor> {
    let nf = params.nf();
    if g.num_features() != nf {
        return Err(Error::ShapeMismatch(format!(
            "gcl feature mismatch: params nf {nf}, graph nf {}",
            g.num_features()
        )));
    }
    let n = g.num_nodes();
    let x = g.node_features.reshaped(&[1, n, nf]);
    let ahat = g.normalized_adjacency();
    Ok(convops::gcl_batch(&x, &params.theta0, &params.theta1, &ahat).reshaped(&[n, nf]))
}

/// [`GclParams`] bound to a concrete graph structure.
#[derive(Clone, Debug)]
pub struct GclOp {
    pub params: GclParams,
    ahat: Tensor,
    shape: Vec<usize>,
}

impl GclOp {
    pub fn new(params: GclParams, graph: &GraphInstance) -> Result<GclOp> {
        if graph.num_features() != params.nf() {
            return Err(Error::ShapeMismatch(format!(
                "gcl feature mismatch: params nf {}, graph nf {}",
                params.nf(),
                graph.num_features()
            )));
        }
        Ok(GclOp {
            params,
            ahat: graph.normalized_adjacency(),
            shape: vec![graph.num_nodes(), graph.num_features()],
        })
    }

    pub fn from_ahat(params: GclParams, ahat: Tensor, n: usize) -> GclOp {
        let nf = params.nf();
        GclOp {
            params,
            ahat,
            shape: vec![n, nf],
        }
    }

    pub fn ahat(&self) -> &Tensor {
        &self.ahat
    }
}

impl LinearOperator for GclOp {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.check_shape(&self.shape, "gcl apply")?;
        let (n, nf) = (self.shape[0], self.shape[1]);
        let lifted = x.reshaped(&[1, n, nf]);
        Ok(
            convops::gcl_batch(&lifted, &self.params.theta0, &self.params.theta1, &self.ahat)
                .reshaped(&self.shape),
        )
    }

    fn transpose_apply(&self, y: &Tensor) -> Result<Tensor> {
        y.check_shape(&self.shape, "gcl transpose apply")?;
        let (n, nf) = (self.shape[0], self.shape[1]);
        let lifted = y.reshaped(&[1, n, nf]);
        Ok(convops::gcl_transpose_batch(
            &lifted,
            &self.params.theta0,
            &self.params.theta1,
            &self.ahat,
        )
        .reshaped(&self.shape))
    }

    fn trace(&self) -> Result<f64> {
        // Â has zero diagonal, so only the θ0 term contributes: N·Tr θ0.
        let n = self.shape[0] as f64;
        let nf = self.params.nf();
        let t: f64 = (0..nf).map(|i| self.params.theta0.data()[i * nf + i]).sum();
        Ok(n * t)
    }
}

// ---------------------------------------------------------------------------
// Householder channel map
// ---------------------------------------------------------------------------

/// Stack of Householder reflections over the channel axis; the product is an
/// orthogonal map applied independently at every spatial position.
#[derive(Clone, Debug)]
pub struct HouseholderStack {
    pub vectors: Vec<Vec<f64>>,
}

impl HouseholderStack {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<HouseholderStack> {
        for (i, v) in vectors.iter().enumerate() {
            let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm <= 1e-8 {
                return Err(Error::Config(format!(
                    "householder vector {i} has near-zero norm {norm:.3e}"
                )));
            }
            if i > 0 && v.len() != vectors[0].len() {
                return Err(Error::ShapeMismatch(
                    "householder vectors must share a length".into(),
                ));
            }
        }
        Ok(HouseholderStack { vectors })
    }

    pub fn identity() -> HouseholderStack {
        HouseholderStack { vectors: vec![] }
    }

    pub fn channels(&self) -> Option<usize> {
        self.vectors.first().map(|v| v.len())
    }

    fn reflect(v: &[f64], x: &mut [f64]) {
        let norm_sq: f64 = v.iter().map(|a| a * a).sum();
        let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let f = 2.0 * dot / norm_sq;
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi -= f * vi;
        }
    }
}

/// Applies Q (product of reflections, last vector outermost) per spatial
/// position, or Qᵀ when `inverse` is set. Norm-preserving.
pub fn householder_apply(q: &HouseholderStack, x: &Tensor, inverse: bool) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "householder input must be [c,h,w], got {s:?}"
        )));
    }
    if let Some(c) = q.channels() {
        if c != s[0] {
            return Err(Error::ShapeMismatch(format!(
                "householder vectors have length {c}, input has {} channels",
                s[0]
            )));
        }
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; c];
    for p in 0..h * w {
        for ci in 0..c {
            buf[ci] = data[ci * h * w + p];
        }
        if inverse {
            for v in &q.vectors {
                HouseholderStack::reflect(v, &mut buf);
            }
        } else {
            for v in q.vectors.iter().rev() {
                HouseholderStack::reflect(v, &mut buf);
            }
        }
        for ci in 0..c {
            data[ci * h * w + p] = buf[ci];
        }
    }
    Ok(out)
}

/// [`HouseholderStack`] bound to a signal shape, as a linear operator.
#[derive(Clone, Debug)]
pub struct HouseholderOp {
    pub stack: HouseholderStack,
    shape: Vec<usize>,
}

impl HouseholderOp {
    pub fn new(stack: HouseholderStack, shape: &[usize]) -> Result<HouseholderOp> {
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "householder operator shape must be [c,h,w], got {shape:?}"
            )));
        }
        Ok(HouseholderOp {
            stack,
            shape: shape.to_vec(),
        })
    }
}

impl LinearOperator for HouseholderOp {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        householder_apply(&self.stack, x, false)
    }

    fn transpose_apply(&self, y: &Tensor) -> Result<Tensor> {
        // Q orthogonal: Qᵀ = Q⁻¹.
        householder_apply(&self.stack, y, true)
    }

    fn trace(&self) -> Result<f64> {
        Err(Error::NoClosedFormTrace(
            "householder product has no stored closed-form trace".into(),
        ))
    }
}

// ---------------------------------------------------------------------------
// Compositions and scaling
// ---------------------------------------------------------------------------

/// Operator scaled by a constant factor.
pub struct ScaledOp<'a> {
    pub inner: &'a dyn LinearOperator,
    pub factor: f64,
}

impl LinearOperator for ScaledOp<'_> {
    fn input_shape(&self) -> &[usize] {
        self.inner.input_shape()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.apply(x)?.scale(self.factor))
    }

    fn transpose_apply(&self, y: &Tensor) -> Result<Tensor> {
        Ok(self.inner.transpose_apply(y)?.scale(self.factor))
    }

    fn trace(&self) -> Result<f64> {
        Ok(self.factor * self.inner.trace()?)
    }
}

/// b ∘ a. Has no closed-form trace.
pub struct ComposeOp<'a> {
    pub first: &'a dyn LinearOperator,
    pub second: &'a dyn LinearOperator,
}

impl LinearOperator for ComposeOp<'_> {
    fn input_shape(&self) -> &[usize] {
        self.first.input_shape()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.second.apply(&self.first.apply(x)?)
    }

    fn transpose_apply(&self, y: &Tensor) -> Result<Tensor> {
        self.first.transpose_apply(&self.second.transpose_apply(y)?)
    }

    fn trace(&self) -> Result<f64> {
        Err(Error::NoClosedFormTrace(
            "composition has no closed-form trace".into(),
        ))
    }
}

// ---------------------------------------------------------------------------
// Spectral normalization
// ---------------------------------------------------------------------------

/// Persistent right-singular-vector estimate for power iteration. Reused
/// across training steps so one iteration per step suffices; certification
/// passes run a few hundred.
#[derive(Clone, Debug)]
pub struct PowerIterState {
    v: Tensor,
}

impl PowerIterState {
    /// Deterministic non-degenerate start: a fixed pseudo-random direction.
    pub fn init(shape: &[usize]) -> PowerIterState {
        let mut rng = crate::rng::Rng::seeded(0x9d5f_3a7e_0c41_u64);
        let mut v = Tensor::randn(&mut rng, shape, 1.0);
        let n = v.l2_norm();
        if n > 0.0 {
            v = v.scale(1.0 / n);
        }
        PowerIterState { v }
    }

    pub fn vector(&self) -> &Tensor {
        &self.v
    }
}

/// Runs `iters` power-iteration steps and returns the spectral norm
/// estimate; the state is updated in place. Returns 0.0 for a numerically
/// zero operator.
pub fn estimate_sigma(
    op: &dyn LinearOperator,
    state: &mut PowerIterState,
    iters: usize,
) -> Result<f64> {
    let mut sigma = 0.0;
    for _ in 0..iters {
        let mv = op.apply(&state.v)?;
        sigma = mv.l2_norm();
        if sigma < 1e-12 {
            return Ok(0.0);
        }
        let mtmv = op.transpose_apply(&mv)?;
        let n = mtmv.l2_norm();
        if n < 1e-300 {
            return Ok(0.0);
        }
        state.v = mtmv.scale(1.0 / n);
    }
    Ok(sigma)
}

/// Scales the operator to spectral norm `coeff` (factor coeff/σ). A zero
/// operator is returned unscaled with σ = 0 so callers can tell the
/// estimate was degenerate.
pub fn spectral_normalize<'a>(
    op: &'a dyn LinearOperator,
    coeff: f64,
    state: &mut PowerIterState,
    iters: usize,
) -> Result<(ScaledOp<'a>, f64)> {
    assert!(coeff > 0.0, "spectral coefficient must be positive");
    let sigma = estimate_sigma(op, state, iters)?;
    let factor = if sigma == 0.0 { 1.0 } else { coeff / sigma };
    Ok((ScaledOp { inner: op, factor }, sigma))
}

/// Scale factor that only shrinks: min(1, coeff/σ). Training uses this form
/// so parameters initialized near zero keep the layer an identity map
/// instead of being blown up to the target norm.
pub fn cap_factor(coeff: f64, sigma: f64) -> f64 {
    if sigma <= coeff || sigma == 0.0 {
        1.0
    } else {
        coeff / sigma
    }
}

/// Power iteration on a small square matrix [f, f]; used for the graph
/// convolution norm rule where θ0 and θ1 are normalized individually.
pub fn matrix_sigma(m: &Tensor, iters: usize) -> f64 {
    let s = m.shape();
    assert_eq!(s.len(), 2);
    assert_eq!(s[0], s[1]);
    let f = s[0];
    let mt = gemm::transpose(m.data(), f, f);
    let mut v: Vec<f64> = (0..f).map(|i| 1.0 + 0.1 * (i as f64 + 1.0)).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n0 = norm(&v);
    v.iter_mut().for_each(|a| *a /= n0);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let mv = gemm::matmul(m.data(), &v, f, f, 1);
        sigma = norm(&mv);
        if sigma < 1e-12 {
            return 0.0;
        }
        let mtmv = gemm::matmul(&mt, &mv, f, f, 1);
        let n = norm(&mtmv);
        if n < 1e-300 {
            return 0.0;
        }
        v = mtmv.into_iter().map(|a| a / n).collect();
    }
    sigma
}

/// Norm rule of thumb for the graph convolution: cap ‖θ0‖₂ at one over the
/// maximum neighbour count and ‖θ1‖₂ at one.
pub fn normalize_gcl_params(params: &GclParams, max_neighbours: usize, iters: usize) -> GclParams {
    let cap0 = 1.0 / (max_neighbours.max(1) as f64);
    let s0 = matrix_sigma(&params.theta0, iters);
    let s1 = matrix_sigma(&params.theta1, iters);
    GclParams {
        theta0: params.theta0.scale(cap_factor(cap0, s0)),
        theta1: params.theta1.scale(cap_factor(1.0, s1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{build_equivalent_matrix, DenseMatrix, DIMENSION_CAP};
    use crate::rng::Rng;
    use crate::tensor::permute_nodes;

    pub(crate) fn identity_kernel(c: usize, k: usize, padding: Padding) -> ConvKernel {
        let mut w = Tensor::zeros(&[c, c, k, k]);
        for ci in 0..c {
            w.data_mut()[((ci * c + ci) * k + k / 2) * k + k / 2] = 1.0;
        }
        ConvKernel::new(w, padding).unwrap()
    }

    fn path_graph(n: usize, nf: usize, rng: &mut Rng) -> GraphInstance {
        let mut adj = Tensor::zeros(&[n, n]);
        for i in 0..n - 1 {
            adj.data_mut()[i * n + i + 1] = 1.0;
            adj.data_mut()[(i + 1) * n + i] = 1.0;
        }
        GraphInstance::new(Tensor::randn(rng, &[n, nf], 1.0), adj).unwrap()
    }

    #[test]
    fn identity_kernel_leaves_input() {
        let mut rng = Rng::seeded(31);
        let x = Tensor::randn(&mut rng, &[3, 5, 5], 1.0);
        let k = identity_kernel(3, 3, Padding::Zero);
        assert_eq!(conv2d_apply(&k, &x).unwrap(), x);
        assert_eq!(conv2d_transpose_apply(&k, &x).unwrap(), x);
    }

    #[test]
    fn edge_filter_on_constant_image() {
        // [0.6, 0, -0.6] on a constant image cancels in the interior and
        // survives only where zero padding breaks the symmetry.
        let w = Tensor::from_vec(&[1, 1, 1, 3], vec![0.6, 0.0, -0.6]);
        let k = ConvKernel::new(w, Padding::Zero).unwrap();
        let x = Tensor::filled(&[1, 4, 5], 1.0);
        let y = conv2d_apply(&k, &x).unwrap();
        for row in 0..4 {
            for col in 0..5 {
                let v = y.data()[row * 5 + col];
                if col == 0 {
                    assert!((v + 0.6).abs() < 1e-15);
                } else if col == 4 {
                    assert!((v - 0.6).abs() < 1e-15);
                } else {
                    assert!(v.abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn conv_matches_equivalent_matrix() {
        let mut rng = Rng::seeded(32);
        for padding in [Padding::Zero, Padding::Periodic] {
            let k = ConvKernel::new(Tensor::randn(&mut rng, &[2, 2, 3, 3], 1.0), padding).unwrap();
            let op = ConvOp::new(k, &[2, 4, 4]).unwrap();
            let m = build_equivalent_matrix(&op, DIMENSION_CAP).unwrap();
            let mt = m.transpose();
            for _ in 0..10 {
                let x = Tensor::randn(&mut rng, &[2, 4, 4], 1.0);
                let direct = op.apply(&x).unwrap();
                let via_matrix = m.mul_vec(x.data());
                for (a, b) in direct.data().iter().zip(&via_matrix) {
                    assert!((a - b).abs() < 1e-12);
                }
                let tdirect = op.transpose_apply(&x).unwrap();
                let tvia = mt.mul_vec(x.data());
                for (a, b) in tdirect.data().iter().zip(&tvia) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fig2_band_structure() {
        // 3x3 zero-padded kernel on 1x5x5: entry (i,j) of the 25x25
        // equivalent matrix is nonzero only when pixel j is in the 3x3
        // neighbourhood of pixel i.
        let mut rng = Rng::seeded(33);
        let k = ConvKernel::new(
            Tensor::randn(&mut rng, &[1, 1, 3, 3], 1.0),
            Padding::Zero,
        )
        .unwrap();
        let op = ConvOp::new(k, &[1, 5, 5]).unwrap();
        let m = build_equivalent_matrix(&op, DIMENSION_CAP).unwrap();
        assert_eq!((m.rows(), m.cols()), (25, 25));
        for i in 0..25 {
            let (iy, ix) = (i / 5, i % 5);
            for j in 0..25 {
                let (jy, jx) = (j / 5, j % 5);
                let neighbour =
                    (iy as i64 - jy as i64).abs() <= 1 && (ix as i64 - jx as i64).abs() <= 1;
                if neighbour {
                    assert!(m.get(i, j) != 0.0, "expected nonzero at ({i},{j})");
                } else {
                    assert_eq!(m.get(i, j), 0.0, "expected zero at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn adjoint_identity_random_pairs() {
        let mut rng = Rng::seeded(34);
        let k = ConvKernel::new(
            Tensor::randn(&mut rng, &[1, 1, 3, 3], 1.0),
            Padding::Zero,
        )
        .unwrap();
        for _ in 0..25 {
            let x = Tensor::randn(&mut rng, &[1, 5, 5], 1.0);
            let y = Tensor::randn(&mut rng, &[1, 5, 5], 1.0);
            let lhs = conv2d_apply(&k, &x).unwrap().dot(&y);
            let rhs = x.dot(&conv2d_transpose_apply(&k, &y).unwrap());
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn gcl_trivial_cases() {
        let mut rng = Rng::seeded(35);
        let g = path_graph(4, 3, &mut rng);
        let t0 = Tensor::randn(&mut rng, &[3, 3], 1.0);
        // θ1 = 0: pure per-node linear map
        let p = GclParams::new(t0.clone(), Tensor::zeros(&[3, 3])).unwrap();
        let y = gcl_apply(&p, &g).unwrap();
        let expect = Tensor::from_vec(
            &[4, 3],
            gemm::matmul(g.node_features.data(), t0.data(), 4, 3, 3),
        );
        assert!(y.max_abs_diff(&expect) < 1e-14);
        // θ0 = I, θ1 = 0: identity
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let p = GclParams::new(eye, Tensor::zeros(&[3, 3])).unwrap();
        assert!(gcl_apply(&p, &g).unwrap().max_abs_diff(&g.node_features) < 1e-15);
    }

    #[test]
    fn gcl_matches_kronecker_form() {
        // Row-major flattening of [n, nf] makes the equivalent matrix
        // I ⊗ θ0ᵀ + Â ⊗ θ1ᵀ; checked entry-wise against basis probing.
        let mut rng = Rng::seeded(36);
        let g = path_graph(3, 2, &mut rng);
        let t0 = Tensor::randn(&mut rng, &[2, 2], 1.0);
        let t1 = Tensor::randn(&mut rng, &[2, 2], 1.0);
        let params = GclParams::new(t0.clone(), t1.clone()).unwrap();
        let op = GclOp::new(params, &g).unwrap();
        let probed = build_equivalent_matrix(&op, DIMENSION_CAP).unwrap();
        assert_eq!((probed.rows(), probed.cols()), (6, 6));

        let ahat = g.normalized_adjacency();
        let mut kron = DenseMatrix::zeros(6, 6);
        for bn in 0..3 {
            for bm in 0..3 {
                let outer = if bn == bm { 1.0 } else { 0.0 };
                let a = ahat.data()[bn * 3 + bm];
                for fi in 0..2 {
                    for fj in 0..2 {
                        // θᵀ[fi,fj] = θ[fj,fi]
                        let v = outer * t0.data()[fj * 2 + fi] + a * t1.data()[fj * 2 + fi];
                        kron.set(bn * 2 + fi, bm * 2 + fj, v);
                    }
                }
            }
        }
        assert!(probed.max_abs_diff(&kron) < 1e-14);
    }

    #[test]
    fn trace_formulas_match_dense() {
        let mut rng = Rng::seeded(37);
        // zero kernel
        let zk = ConvKernel::new(Tensor::zeros(&[1, 1, 3, 3]), Padding::Zero).unwrap();
        assert_eq!(ConvOp::new(zk, &[1, 5, 5]).unwrap().trace().unwrap(), 0.0);
        // single-channel 3x3 with center value a on 1x5x5
        let mut w = Tensor::randn(&mut rng, &[1, 1, 3, 3], 1.0);
        let a = 0.7321;
        w.data_mut()[4] = a;
        let op = ConvOp::new(ConvKernel::new(w, Padding::Zero).unwrap(), &[1, 5, 5]).unwrap();
        assert!((op.trace().unwrap() - 25.0 * a).abs() < 1e-12);
        // conv and gcl against dense equivalent traces
        for padding in [Padding::Zero, Padding::Periodic] {
            for _ in 0..25 {
                let k =
                    ConvKernel::new(Tensor::randn(&mut rng, &[2, 2, 3, 3], 1.0), padding).unwrap();
                let op = ConvOp::new(k, &[2, 5, 4]).unwrap();
                let m = build_equivalent_matrix(&op, DIMENSION_CAP).unwrap();
                assert!((op.trace().unwrap() - m.trace()).abs() < 1e-10);
            }
        }
        for _ in 0..50 {
            let g = path_graph(4, 3, &mut rng);
            let params = GclParams::new(
                Tensor::randn(&mut rng, &[3, 3], 1.0),
                Tensor::randn(&mut rng, &[3, 3], 1.0),
            )
            .unwrap();
            let op = GclOp::new(params, &g).unwrap();
            let m = build_equivalent_matrix(&op, DIMENSION_CAP).unwrap();
            assert!((op.trace().unwrap() - m.trace()).abs() < 1e-12);
        }
    }

    #[test]
    fn gcl_permutation_equivariance() {
        let mut rng = Rng::seeded(38);
        for _ in 0..20 {
            let g = path_graph(5, 2, &mut rng);
            let params = GclParams::new(
                Tensor::randn(&mut rng, &[2, 2], 1.0),
                Tensor::randn(&mut rng, &[2, 2], 1.0),
            )
            .unwrap();
            let y = gcl_apply(&params, &g).unwrap();
            let perm = rng.permutation(5);
            // permute both features and adjacency consistently
            let px = permute_nodes(&g.node_features, &perm);
            let mut padj = Tensor::zeros(&[5, 5]);
            for i in 0..5 {
                for j in 0..5 {
                    padj.data_mut()[i * 5 + j] = g.adjacency.data()[perm[i] * 5 + perm[j]];
                }
            }
            let pg = GraphInstance::new(px, padj).unwrap();
            let py = gcl_apply(&params, &pg).unwrap();
            // same real value; float summation order may differ by ulps
            assert!(py.max_abs_diff(&permute_nodes(&y, &perm)) < 1e-13);
        }
    }

    #[test]
    fn householder_basics() {
        let mut rng = Rng::seeded(39);
        let x = Tensor::randn(&mut rng, &[3, 4, 4], 1.0);
        // empty stack
        let q = HouseholderStack::identity();
        assert_eq!(householder_apply(&q, &x, false).unwrap(), x);
        // e1 reflection negates channel 0 everywhere
        let q = HouseholderStack::new(vec![vec![1.0, 0.0, 0.0]]).unwrap();
        let y = householder_apply(&q, &x, false).unwrap();
        for p in 0..16 {
            assert_eq!(y.data()[p], -x.data()[p]);
            assert_eq!(y.data()[16 + p], x.data()[16 + p]);
            assert_eq!(y.data()[32 + p], x.data()[32 + p]);
        }
        // round trip and norm preservation
        let q = HouseholderStack::new(vec![
            (0..3).map(|_| rng.normal()).collect(),
            (0..3).map(|_| rng.normal()).collect(),
        ])
        .unwrap();
        let y = householder_apply(&q, &x, false).unwrap();
        assert!((y.l2_norm() - x.l2_norm()).abs() < 1e-12);
        let back = householder_apply(&q, &y, true).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn householder_is_orthogonal_via_dense() {
        let mut rng = Rng::seeded(40);
        let q = HouseholderStack::new(vec![
            (0..4).map(|_| rng.normal()).collect(),
            (0..4).map(|_| rng.normal()).collect(),
            (0..4).map(|_| rng.normal()).collect(),
        ])
        .unwrap();
        let op = HouseholderOp::new(q, &[4, 1, 1]).unwrap();
        let m = build_equivalent_matrix(&op, DIMENSION_CAP).unwrap();
        let qtq = m.transpose().matmul(&m);
        assert!(qtq.max_abs_diff(&DenseMatrix::identity(4)) < 1e-10);
    }

    #[test]
    fn rejects_near_zero_reflection() {
        assert!(HouseholderStack::new(vec![vec![0.0, 1e-12]]).is_err());
    }

    #[test]
    fn spectral_normalize_identity_and_diagonal() {
        // identity kernel: σ = 1
        let k = identity_kernel(2, 3, Padding::Zero);
        let op = ConvOp::new(k, &[2, 6, 6]).unwrap();
        let mut state = PowerIterState::init(&[2, 6, 6]);
        let (scaled, sigma) = spectral_normalize(&op, 0.9, &mut state, 50).unwrap();
        assert!((sigma - 1.0).abs() < 1e-6, "sigma {sigma}");
        assert!((scaled.factor - 0.9).abs() < 1e-6);
        // diagonal 1x1 conv with entries (2, 0.5): σ = 2
        let w = Tensor::from_vec(&[2, 2, 1, 1], vec![2.0, 0.0, 0.0, 0.5]);
        let op = ConvOp::new(ConvKernel::new(w, Padding::Zero).unwrap(), &[2, 3, 3]).unwrap();
        let mut state = PowerIterState::init(&[2, 3, 3]);
        let (scaled, sigma) = spectral_normalize(&op, 0.9, &mut state, 200).unwrap();
        assert!((sigma - 2.0).abs() < 1e-6, "sigma {sigma}");
        let w_scaled = [2.0 * scaled.factor, 0.5 * scaled.factor];
        assert!((w_scaled[0] - 0.9).abs() < 1e-6);
        assert!((w_scaled[1] - 0.225).abs() < 1e-6);
    }

    #[test]
    fn spectral_normalize_zero_operator_flagged() {
        let k = ConvKernel::new(Tensor::zeros(&[1, 1, 3, 3]), Padding::Zero).unwrap();
        let op = ConvOp::new(k, &[1, 4, 4]).unwrap();
        let mut state = PowerIterState::init(&[1, 4, 4]);
        let (scaled, sigma) = spectral_normalize(&op, 0.9, &mut state, 20).unwrap();
        assert_eq!(sigma, 0.0);
        assert_eq!(scaled.factor, 1.0);
    }

    #[test]
    fn sigma_matches_dense_oracle() {
        let mut rng = Rng::seeded(41);
        let k = ConvKernel::new(Tensor::randn(&mut rng, &[2, 2, 3, 3], 1.0), Padding::Zero)
            .unwrap();
        let op = ConvOp::new(k, &[2, 8, 8]).unwrap();
        let mut state = PowerIterState::init(&[2, 8, 8]);
        let sigma = estimate_sigma(&op, &mut state, 200).unwrap();
        let m = build_equivalent_matrix(&op, DIMENSION_CAP).unwrap();
        let dense_sigma = m.two_norm_estimate(500, &mut rng);
        assert!(
            (sigma - dense_sigma).abs() / dense_sigma < 0.01,
            "{sigma} vs {dense_sigma}"
        );
    }

    #[test]
    fn normalized_operator_certifies() {
        let mut rng = Rng::seeded(42);
        let k = ConvKernel::new(Tensor::randn(&mut rng, &[2, 2, 3, 3], 1.0), Padding::Periodic)
            .unwrap();
        let op = ConvOp::new(k, &[2, 6, 6]).unwrap();
        let mut state = PowerIterState::init(&[2, 6, 6]);
        let (scaled, _) = spectral_normalize(&op, 0.9, &mut state, 150).unwrap();
        let mut check_state = PowerIterState::init(&[2, 6, 6]);
        let sigma = estimate_sigma(&scaled, &mut check_state, 150).unwrap();
        assert!(sigma <= 0.9 * (1.0 + 1e-3), "sigma after scaling {sigma}");
    }

    #[test]
    fn gcl_norm_rule() {
        let mut rng = Rng::seeded(43);
        let params = GclParams::new(
            Tensor::randn(&mut rng, &[3, 3], 2.0),
            Tensor::randn(&mut rng, &[3, 3], 2.0),
        )
        .unwrap();
        let normed = normalize_gcl_params(&params, 4, 100);
        assert!(matrix_sigma(&normed.theta0, 100) <= 0.25 * (1.0 + 1e-9));
        assert!(matrix_sigma(&normed.theta1, 100) <= 1.0 * (1.0 + 1e-9));
        // already-small parameters are untouched
        let small = GclParams::new(
            Tensor::randn(&mut rng, &[3, 3], 1e-4),
            Tensor::randn(&mut rng, &[3, 3], 1e-4),
        )
        .unwrap();
        let normed = normalize_gcl_params(&small, 4, 100);
        assert_eq!(normed.theta0, small.theta0);
        assert_eq!(normed.theta1, small.theta1);
    }

    #[test]
    fn operator_linearity() {
        let mut rng = Rng::seeded(44);
        let k = ConvKernel::new(Tensor::randn(&mut rng, &[2, 2, 3, 3], 1.0), Padding::Zero)
            .unwrap();
        let conv = ConvOp::new(k, &[2, 4, 4]).unwrap();
        let g = path_graph(4, 2, &mut rng);
        let gcl = GclOp::new(
            GclParams::new(
                Tensor::randn(&mut rng, &[2, 2], 1.0),
                Tensor::randn(&mut rng, &[2, 2], 1.0),
            )
            .unwrap(),
            &g,
        )
        .unwrap();
        let ops: [&dyn LinearOperator; 2] = [&conv, &gcl];
        for op in ops {
            let shape = op.input_shape().to_vec();
            for _ in 0..10 {
                let x = Tensor::randn(&mut rng, &shape, 1.0);
                let y = Tensor::randn(&mut rng, &shape, 1.0);
                let (alpha, beta) = (rng.normal(), rng.normal());
                let lhs = op.apply(&x.scale(alpha).add(&y.scale(beta))).unwrap();
                let rhs = op.apply(&x).unwrap().scale(alpha).add(&op.apply(&y).unwrap().scale(beta));
                assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            }
        }
    }

    #[test]
    fn compose_has_no_trace() {
        let mut rng = Rng::seeded(45);
        let k = ConvKernel::new(Tensor::randn(&mut rng, &[1, 1, 3, 3], 1.0), Padding::Zero)
            .unwrap();
        let a = ConvOp::new(k.clone(), &[1, 4, 4]).unwrap();
        let b = ConvOp::new(k, &[1, 4, 4]).unwrap();
        let composed = ComposeOp {
            first: &a,
            second: &b,
        };
        assert!(matches!(
            composed.trace(),
            Err(Error::NoClosedFormTrace(_))
        ));
    }
}
