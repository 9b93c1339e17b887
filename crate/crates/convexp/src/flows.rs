//! Invertible-layer composition with exact log-determinant accounting.
//!
//! A [`FlowModel`] is an ordered stack of dimensionality-preserving
//! invertible layers over one of three signal layouts: images `[b,c,h,w]`,
//! graphs `[b,n,nf]` with a shared fully connected adjacency, or flat
//! vectors `[b,d]`. Forward passes accumulate per-sample log-determinants;
//! the base density is a standard normal over the flattened output, giving
//! exact likelihoods.
//!
//! Coupling layers are mask-based: the masked half passes through
//! unchanged and conditions an affine transform of the rest, so channel
//! splits, checkerboard splits and per-node feature splits all share one
//! code path.

use crate::autodiff::{NodeId, Tape};
use crate::convops::{self, Padding};
use crate::dense::{invert, logdet_via_lu, DenseMatrix};
use crate::error::{Error, Result};
use crate::gemm::{self, Act};
use crate::linop::{cap_factor, matrix_sigma};
use crate::rng::Rng;
use crate::sylvester::{expv_batch, expv_tape, ExpKernel, FixedPointConfig, SylvesterLayer};
use crate::tensor::Tensor;

const LN4: f64 = 1.3862943611198906;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Image { c: usize, h: usize, w: usize },
    Graph { n: usize, nf: usize },
    Flat { d: usize },
}

impl ModelKind {
    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            ModelKind::Image { c, h, w } => vec![c, h, w],
            ModelKind::Graph { n, nf } => vec![n, nf],
            ModelKind::Flat { d } => vec![d],
        }
    }

    pub fn batch_shape(&self, b: usize) -> Vec<usize> {
        let mut s = vec![b];
        s.extend(self.sample_shape());
        s
    }

    pub fn dims(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Axis carrying per-channel / per-feature parameters.
    fn feature_axis(&self) -> usize {
        match self {
            ModelKind::Image { .. } => 1,
            ModelKind::Graph { .. } => 2,
            ModelKind::Flat { .. } => 1,
        }
    }

    pub fn feature_count(&self) -> usize {
        match *self {
            ModelKind::Image { c, .. } => c,
            ModelKind::Graph { nf, .. } => nf,
            ModelKind::Flat { d } => d,
        }
    }

    /// How many positions share one feature parameter.
    fn feature_repeat(&self) -> f64 {
        match *self {
            ModelKind::Image { h, w, .. } => (h * w) as f64,
            ModelKind::Graph { n, .. } => n as f64,
            ModelKind::Flat { .. } => 1.0,
        }
    }

    /// Normalized adjacency of the fully connected graph (graph kinds).
    pub fn fully_connected_ahat(&self) -> Option<Tensor> {
        match *self {
            ModelKind::Graph { n, .. } => {
                let mut ahat = Tensor::filled(&[n, n], 1.0 / (n as f64 - 1.0));
                for i in 0..n {
                    ahat.data_mut()[i * n + i] = 0.0;
                }
                Some(ahat)
            }
            _ => None,
        }
    }
}

/// Log-determinant contribution of one layer on a batch: either one scalar
/// shared by every sample or a per-sample vector.
pub enum LdNode {
    Scalar(NodeId),
    PerSample(NodeId),
}

// ---------------------------------------------------------------------------
// ActNorm
// ---------------------------------------------------------------------------

/// Per-feature affine layer with data-dependent initialization to zero
/// mean, unit variance. The scale is stored in log space so it is nonzero
/// by construction.
#[derive(Clone, Debug)]
pub struct ActNormLayer {
    pub log_scale: Tensor,
    pub bias: Tensor,
    pub initialized: bool,
}

impl ActNormLayer {
    pub fn identity(features: usize) -> ActNormLayer {
        ActNormLayer {
            log_scale: Tensor::zeros(&[features]),
            bias: Tensor::zeros(&[features]),
            initialized: false,
        }
    }

    /// Sets scale/bias so `batch` maps to zero mean, unit variance per
    /// feature.
    pub fn initialize_from(&mut self, kind: &ModelKind, batch: &Tensor) {
        let axis = kind.feature_axis();
        let shape = batch.shape();
        let outer: usize = shape[..axis].iter().product();
        let k = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let count = (outer * inner) as f64;
        let mut mean = vec![0.0; k];
        for o in 0..outer {
            for f in 0..k {
                let base = (o * k + f) * inner;
                for i in 0..inner {
                    mean[f] += batch.data()[base + i];
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        let mut var = vec![0.0; k];
        for o in 0..outer {
            for f in 0..k {
                let base = (o * k + f) * inner;
                for i in 0..inner {
                    let d = batch.data()[base + i] - mean[f];
                    var[f] += d * d;
                }
            }
        }
        for f in 0..k {
            let std = (var[f] / count).sqrt().max(1e-6);
            self.log_scale.data_mut()[f] = -std.ln();
            self.bias.data_mut()[f] = -mean[f] / std;
        }
        self.initialized = true;
    }

    fn forward(&self, kind: &ModelKind, x: &Tensor) -> (Tensor, Vec<f64>) {
        let out = feature_affine(kind, x, &self.log_scale, &self.bias, false);
        let ld = kind.feature_repeat() * self.log_scale.sum();
        (out, vec![ld; x.shape()[0]])
    }

    fn inverse(&self, kind: &ModelKind, z: &Tensor) -> Tensor {
        feature_affine(kind, z, &self.log_scale, &self.bias, true)
    }

    fn forward_tape(
        &self,
        kind: &ModelKind,
        tape: &mut Tape,
        x: NodeId,
        params: &[NodeId],
    ) -> (NodeId, LdNode) {
        let (logs, bias) = (params[0], params[1]);
        let shape = tape.value(x).shape().to_vec();
        let axis = kind.feature_axis();
        let s = tape.exp(logs);
        let sb = tape.broadcast_axis(s, &shape, axis);
        let scaled = tape.mul(x, sb);
        let bb = tape.broadcast_axis(bias, &shape, axis);
        let out = tape.add(scaled, bb);
        let lsum = tape.sum_all(logs);
        let ld = tape.mul_scalar(lsum, kind.feature_repeat());
        (out, LdNode::Scalar(ld))
    }
}

fn feature_affine(
    kind: &ModelKind,
    x: &Tensor,
    log_scale: &Tensor,
    bias: &Tensor,
    inverse: bool,
) -> Tensor {
    let axis = kind.feature_axis();
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let k = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = x.clone();
    let od = out.data_mut();
    for o in 0..outer {
        for f in 0..k {
            let s = log_scale.data()[f].exp();
            let b = bias.data()[f];
            let base = (o * k + f) * inner;
            if inverse {
                for v in &mut od[base..base + inner] {
                    *v = (*v - b) / s;
                }
            } else {
                for v in &mut od[base..base + inner] {
                    *v = *v * s + b;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Invertible 1x1 mixing
// ---------------------------------------------------------------------------

/// Square mixing matrix over the feature axis, stored plainly; log|det|
/// comes from an LU factorization at evaluation time (feature counts are
/// tiny at this scale).
#[derive(Clone, Debug)]
pub struct Mix1x1Layer {
    pub weight: Tensor,
}

impl Mix1x1Layer {
    pub fn identity(features: usize) -> Mix1x1Layer {
        let mut w = Tensor::zeros(&[features, features]);
        for i in 0..features {
            w.data_mut()[i * features + i] = 1.0;
        }
        Mix1x1Layer { weight: w }
    }

    fn forward(&self, kind: &ModelKind, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let out = mix_apply(kind, x, &self.weight);
        let k = self.weight.shape()[0];
        let m = DenseMatrix::from_vec(k, k, self.weight.data().to_vec());
        let (ld, _) = logdet_via_lu(&m)?;
        Ok((out, vec![kind.feature_repeat() * ld; x.shape()[0]]))
    }

    fn inverse(&self, kind: &ModelKind, z: &Tensor) -> Result<Tensor> {
        let k = self.weight.shape()[0];
        let m = DenseMatrix::from_vec(k, k, self.weight.data().to_vec());
        let winv = invert(&m)?;
        Ok(mix_apply(
            kind,
            z,
            &Tensor::from_vec(&[k, k], winv.data().to_vec()),
        ))
    }

    fn forward_tape(
        &self,
        kind: &ModelKind,
        tape: &mut Tape,
        x: NodeId,
        params: &[NodeId],
    ) -> Result<(NodeId, LdNode)> {
        let w = params[0];
        let out = match kind {
            ModelKind::Image { c, .. } => {
                let k4 = tape.reshape(w, &[*c, *c, 1, 1]);
                tape.conv2d(x, k4, Padding::Zero, None)
            }
            // rows are feature vectors: y = x · Wᵀ gives the per-position
            // action W·x used on the image path
            ModelKind::Graph { .. } | ModelKind::Flat { .. } => {
                let wt = tape.transpose2d(w);
                tape.linear(x, wt)
            }
        };
        let ld = tape.log_abs_det(w)?;
        let scaled = tape.mul_scalar(ld, kind.feature_repeat());
        Ok((out, LdNode::Scalar(scaled)))
    }
}

fn mix_apply(kind: &ModelKind, x: &Tensor, w: &Tensor) -> Tensor {
    let k = w.shape()[0];
    match kind {
        ModelKind::Image { c, .. } => {
            let k4 = w.reshaped(&[*c, *c, 1, 1]);
            convops::conv2d_batch(x, &k4, Padding::Zero)
        }
        ModelKind::Graph { .. } | ModelKind::Flat { .. } => {
            let rows = x.numel() / k;
            let wt = gemm::transpose(w.data(), k, k);
            Tensor::from_vec(x.shape(), gemm::matmul(x.data(), &wt, rows, k, k))
        }
    }
}

// ---------------------------------------------------------------------------
// Operator exponentials as flow layers
// ---------------------------------------------------------------------------

/// Convolution exponential layer: z = exp(M)·x computed implicitly, with
/// log-determinant h·w·Σ_c m[c,c,center].
#[derive(Clone, Debug)]
pub struct ConvExpLayer {
    pub kernel: ExpKernel,
    pub terms: usize,
}

impl ConvExpLayer {
    pub fn init(kind: &ModelKind, rng: &mut Rng) -> ConvExpLayer {
        let ModelKind::Image { c, h, w } = *kind else {
            panic!("conv exponential needs an image layout");
        };
        ConvExpLayer {
            kernel: ExpKernel::init(c, &[c, h, w], rng),
            terms: 6,
        }
    }

    fn forward(&self, kind: &ModelKind, x: &Tensor) -> (Tensor, Vec<f64>) {
        let k = self.kernel.effective_weights();
        let out = expv_batch(x, &k, self.kernel.padding, self.terms, 1.0);
        let ld = kind.feature_repeat() * center_diag_sum(&k);
        (out, vec![ld; x.shape()[0]])
    }

    fn inverse(&self, z: &Tensor) -> Tensor {
        let k = self.kernel.effective_weights();
        expv_batch(z, &k, self.kernel.padding, self.terms, -1.0)
    }

    fn forward_tape(
        &self,
        kind: &ModelKind,
        tape: &mut Tape,
        x: NodeId,
        params: &[NodeId],
    ) -> (NodeId, LdNode) {
        let k = tape.mul_scalar(params[0], self.kernel.factor());
        let out = expv_tape(tape, x, k, self.kernel.padding, self.terms, false);
        let ld = tape.conv_exp_logdet(k, kind.feature_repeat());
        (out, LdNode::Scalar(ld))
    }
}

fn center_diag_sum(k: &Tensor) -> f64 {
    let s = k.shape();
    let (c, kh, kw) = (s[0], s[2], s[3]);
    (0..c)
        .map(|ci| k.data()[((ci * c + ci) * kh + kh / 2) * kw + kw / 2])
        .sum()
}

/// Graph convolution exponential layer over the shared normalized
/// adjacency; log-determinant is n·tr(θ0). The norm rule of thumb caps
/// ‖θ0‖₂ at one over the maximum neighbour count and ‖θ1‖₂ at one.
#[derive(Clone, Debug)]
pub struct GclExpLayer {
    pub theta0: Tensor,
    pub theta1: Tensor,
    pub terms: usize,
    max_neighbours: usize,
    factor0: f64,
    factor1: f64,
}

impl GclExpLayer {
    pub fn init(kind: &ModelKind, rng: &mut Rng) -> GclExpLayer {
        let ModelKind::Graph { n, nf } = *kind else {
            panic!("graph convolution exponential needs a graph layout");
        };
        GclExpLayer {
            // near-zero init keeps the initial exponential an identity map
            theta0: Tensor::randn(rng, &[nf, nf], 1e-4),
            theta1: Tensor::randn(rng, &[nf, nf], 1e-4),
            terms: 6,
            max_neighbours: n - 1,
            factor0: 1.0,
            factor1: 1.0,
        }
    }

    pub fn max_neighbours(&self) -> usize {
        self.max_neighbours
    }

    pub fn set_max_neighbours(&mut self, m: usize) {
        self.max_neighbours = m;
    }

    pub fn refresh_certificates(&mut self, iters: usize) {
        let cap0 = 1.0 / self.max_neighbours.max(1) as f64;
        self.factor0 = cap_factor(cap0, matrix_sigma(&self.theta0, iters));
        self.factor1 = cap_factor(1.0, matrix_sigma(&self.theta1, iters));
    }

    fn effective(&self) -> (Tensor, Tensor) {
        (
            self.theta0.scale(self.factor0),
            self.theta1.scale(self.factor1),
        )
    }

    fn forward(&self, kind: &ModelKind, ahat: &Tensor, x: &Tensor) -> (Tensor, Vec<f64>) {
        let (t0, t1) = self.effective();
        let out = gcl_expv_batch(x, &t0, &t1, ahat, self.terms, 1.0);
        let nf = t0.shape()[0];
        let tr: f64 = (0..nf).map(|i| t0.data()[i * nf + i]).sum();
        let ld = kind.feature_repeat() * tr;
        (out, vec![ld; x.shape()[0]])
    }

    fn inverse(&self, ahat: &Tensor, z: &Tensor) -> Tensor {
        let (t0, t1) = self.effective();
        gcl_expv_batch(z, &t0, &t1, ahat, self.terms, -1.0)
    }

    fn forward_tape(
        &self,
        kind: &ModelKind,
        ahat: &Tensor,
        tape: &mut Tape,
        x: NodeId,
        params: &[NodeId],
    ) -> (NodeId, LdNode) {
        let t0 = tape.mul_scalar(params[0], self.factor0);
        let t1 = tape.mul_scalar(params[1], self.factor1);
        let mut z = x;
        let mut pi = x;
        for i in 1..=self.terms {
            let applied = tape.gcl(pi, t0, t1, ahat.clone());
            pi = tape.mul_scalar(applied, 1.0 / i as f64);
            z = tape.add(z, pi);
        }
        let ld = tape.gcl_exp_logdet(t0, kind.feature_repeat());
        (z, LdNode::Scalar(ld))
    }
}

fn gcl_expv_batch(
    x: &Tensor,
    t0: &Tensor,
    t1: &Tensor,
    ahat: &Tensor,
    terms: usize,
    sign: f64,
) -> Tensor {
    let (t0, t1) = if sign < 0.0 {
        (t0.scale(-1.0), t1.scale(-1.0))
    } else {
        (t0.clone(), t1.clone())
    };
    let mut z = x.clone();
    let mut pi = x.clone();
    for i in 1..=terms {
        pi = convops::gcl_batch(&pi, &t0, &t1, ahat).scale(1.0 / i as f64);
        z = z.add(&pi);
    }
    z
}

// ---------------------------------------------------------------------------
// Coupling layers
// ---------------------------------------------------------------------------

/// Bounded log-scale squash: ln4·(2σ(r) − 1) ∈ (−ln4, ln4).
fn squash(r: f64) -> f64 {
    LN4 * (2.0 / (1.0 + (-r).exp()) - 1.0)
}

fn squash_tape(tape: &mut Tape, r: NodeId) -> NodeId {
    let s = tape.sigmoid(r);
    let two = tape.mul_scalar(s, 2.0);
    let shifted = tape.add_scalar(two, -1.0);
    tape.mul_scalar(shifted, LN4)
}

/// Affine coupling for images. `mask` (1 = untouched, conditioning half) is
/// either a channel split or a checkerboard; the conditioner is a small
/// convolutional net with smooth activations and zero-initialized heads.
#[derive(Clone, Debug)]
pub struct ImageCoupling {
    pub mask: Tensor,
    pub hidden: usize,
    style: ImageMask,
    parity: bool,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_shift: Tensor,
    pub b_shift: Tensor,
    pub w_scale: Tensor,
    pub b_scale: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageMask {
    ChannelHalf,
    Checkerboard,
}

impl ImageCoupling {
    pub fn init(kind: &ModelKind, style: ImageMask, parity: bool, hidden: usize, rng: &mut Rng) -> ImageCoupling {
        let ModelKind::Image { c, h, w } = *kind else {
            panic!("image coupling needs an image layout");
        };
        let mut mask = Tensor::zeros(&[c, h, w]);
        match style {
            ImageMask::ChannelHalf => {
                assert!(c >= 2, "channel split needs at least two channels");
                let half = c / 2;
                for ci in 0..c {
                    let keep = (ci < half) ^ parity;
                    if keep {
                        for p in 0..h * w {
                            mask.data_mut()[ci * h * w + p] = 1.0;
                        }
                    }
                }
            }
            ImageMask::Checkerboard => {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let keep = ((y + x) % 2 == 0) ^ parity;
                            if keep {
                                mask.data_mut()[(ci * h + y) * w + x] = 1.0;
                            }
                        }
                    }
                }
            }
        }
        ImageCoupling {
            mask,
            hidden,
            style,
            parity,
            w_in: Tensor::randn(rng, &[hidden, c, 3, 3], 0.05),
            b_in: Tensor::zeros(&[hidden]),
            w_shift: Tensor::zeros(&[c, hidden, 3, 3]),
            b_shift: Tensor::zeros(&[c]),
            w_scale: Tensor::zeros(&[c, hidden, 3, 3]),
            b_scale: Tensor::zeros(&[c]),
        }
    }

    pub fn mask_is_checkerboard(&self) -> bool {
        self.style == ImageMask::Checkerboard
    }

    pub fn mask_parity(&self) -> bool {
        self.parity
    }

    fn batch_mask(&self, b: usize) -> Tensor {
        let s = self.mask.shape();
        let mut out = Tensor::zeros(&[b, s[0], s[1], s[2]]);
        let per = self.mask.numel();
        for bi in 0..b {
            out.data_mut()[bi * per..(bi + 1) * per].copy_from_slice(self.mask.data());
        }
        out
    }

    /// Conditioner outputs (shift, log-scale), already restricted to the
    /// transformed half.
    fn conditioner(&self, xm: &Tensor, inv_mask: &Tensor) -> (Tensor, Tensor) {
        let h = add_bias_axis1(
            &convops::conv2d_batch(xm, &self.w_in, Padding::Zero),
            &self.b_in,
        )
        .map(f64::tanh);
        let shift = add_bias_axis1(
            &convops::conv2d_batch(&h, &self.w_shift, Padding::Zero),
            &self.b_shift,
        );
        let scale = add_bias_axis1(
            &convops::conv2d_batch(&h, &self.w_scale, Padding::Zero),
            &self.b_scale,
        );
        (shift.mul(inv_mask), scale.map(squash).mul(inv_mask))
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Vec<f64>) {
        let b = x.shape()[0];
        let m = self.batch_mask(b);
        let inv = m.map(|v| 1.0 - v);
        let xm = x.mul(&m);
        let (t, s) = self.conditioner(&xm, &inv);
        let z = x.mul(&s.map(f64::exp)).add(&t);
        let per = x.numel() / b;
        let ld = (0..b)
            .map(|bi| s.data()[bi * per..(bi + 1) * per].iter().sum())
            .collect();
        (z, ld)
    }

    fn inverse(&self, z: &Tensor) -> Tensor {
        let b = z.shape()[0];
        let m = self.batch_mask(b);
        let inv = m.map(|v| 1.0 - v);
        let zm = z.mul(&m);
        let (t, s) = self.conditioner(&zm, &inv);
        z.sub(&t).mul(&s.map(|v| (-v).exp()))
    }

    fn forward_tape(&self, tape: &mut Tape, x: NodeId, params: &[NodeId]) -> (NodeId, LdNode) {
        let b = tape.value(x).shape()[0];
        let m = self.batch_mask(b);
        let inv = m.map(|v| 1.0 - v);
        let shape = tape.value(x).shape().to_vec();
        let xm = tape.mul_const(x, m);
        let h0 = tape.conv2d(xm, params[0], Padding::Zero, None);
        let b0 = tape.broadcast_axis(params[1], &[shape[0], self.hidden, shape[2], shape[3]], 1);
        let h1 = tape.add(h0, b0);
        let h = tape.tanh(h1);
        let t0 = tape.conv2d(h, params[2], Padding::Zero, None);
        let bt = tape.broadcast_axis(params[3], &shape, 1);
        let t1 = tape.add(t0, bt);
        let t = tape.mul_const(t1, inv.clone());
        let s0 = tape.conv2d(h, params[4], Padding::Zero, None);
        let bs = tape.broadcast_axis(params[5], &shape, 1);
        let s1 = tape.add(s0, bs);
        let s2 = squash_tape(tape, s1);
        let s = tape.mul_const(s2, inv);
        let es = tape.exp(s);
        let scaled = tape.mul(x, es);
        let z = tape.add(scaled, t);
        let ld = tape.sum_per_sample(s);
        (z, LdNode::PerSample(ld))
    }
}

fn add_bias_axis1(x: &Tensor, bias: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let add = bias.data()[ci];
            for v in &mut out.data_mut()[(bi * c + ci) * inner..(bi * c + ci + 1) * inner] {
                *v += add;
            }
        }
    }
    out
}

/// Affine coupling for graphs: a per-node feature split conditioned
/// through permutation-equivariant message passing over the fully
/// connected adjacency (edge MLP on node pairs, mean aggregation, node
/// MLP).
#[derive(Clone, Debug)]
pub struct GraphCoupling {
    pub feature_mask: Tensor,
    pub hidden: usize,
    pub msg_dim: usize,
    parity: bool,
    pub w_e1: Tensor,
    pub b_e1: Tensor,
    pub w_e2: Tensor,
    pub b_e2: Tensor,
    pub w_e3: Tensor,
    pub b_e3: Tensor,
    pub w_n1: Tensor,
    pub b_n1: Tensor,
    pub w_n2: Tensor,
    pub b_n2: Tensor,
}

impl GraphCoupling {
    pub fn init(kind: &ModelKind, parity: bool, hidden: usize, msg_dim: usize, rng: &mut Rng) -> GraphCoupling {
        let ModelKind::Graph { nf, .. } = *kind else {
            panic!("graph coupling needs a graph layout");
        };
        assert!(nf >= 2, "feature split needs at least two features");
        let mut mask = Tensor::zeros(&[nf]);
        let half = nf / 2;
        for f in 0..nf {
            if (f < half) ^ parity {
                mask.data_mut()[f] = 1.0;
            }
        }
        let glorot = |rng: &mut Rng, rows: usize, cols: usize| {
            Tensor::randn(rng, &[rows, cols], (2.0 / (rows + cols) as f64).sqrt())
        };
        GraphCoupling {
            feature_mask: mask,
            hidden,
            msg_dim,
            parity,
            w_e1: glorot(rng, 2 * nf, hidden),
            b_e1: Tensor::zeros(&[hidden]),
            w_e2: glorot(rng, hidden, hidden),
            b_e2: Tensor::zeros(&[hidden]),
            w_e3: glorot(rng, hidden, msg_dim),
            b_e3: Tensor::zeros(&[msg_dim]),
            w_n1: glorot(rng, nf + msg_dim, hidden),
            b_n1: Tensor::zeros(&[hidden]),
            w_n2: Tensor::zeros(&[hidden, 2 * nf]),
            b_n2: Tensor::zeros(&[2 * nf]),
        }
    }

    pub fn mask_parity(&self) -> bool {
        self.parity
    }

    fn masks(&self, b: usize, n: usize) -> (Tensor, Tensor) {
        let nf = self.feature_mask.numel();
        let mut m = Tensor::zeros(&[b, n, nf]);
        for r in 0..b * n {
            m.data_mut()[r * nf..(r + 1) * nf].copy_from_slice(self.feature_mask.data());
        }
        let inv = m.map(|v| 1.0 - v);
        (m, inv)
    }

    fn conditioner(&self, xm: &Tensor) -> (Tensor, Tensor) {
        let s = xm.shape();
        let (b, n, nf) = (s[0], s[1], s[2]);
        // edge messages on the off-diagonal pairs; first layer fused
        let e1 = crate::autodiff::pair_edge_affine_forward(xm, &self.w_e1, &self.b_e1, Act::Leaky(0.0));
        let e2 = linear_bias_relu(&e1, &self.w_e2, &self.b_e2, true);
        let e3 = linear_bias_relu(&e2, &self.w_e3, &self.b_e3, false);
        // mean over the neighbour axis
        let mut agg = Tensor::zeros(&[b, n, self.msg_dim]);
        for bi in 0..b {
            for i in 0..n {
                for slot in 0..n - 1 {
                    let base = ((bi * n + i) * (n - 1) + slot) * self.msg_dim;
                    for k in 0..self.msg_dim {
                        agg.data_mut()[(bi * n + i) * self.msg_dim + k] += e3.data()[base + k];
                    }
                }
            }
        }
        let agg = agg.scale(1.0 / (n.max(2) as f64 - 1.0));
        // node update
        let cat = concat_last_pure(xm, &agg);
        let n1 = linear_bias_relu(
            &cat.reshaped(&[b * n, nf + self.msg_dim]),
            &self.w_n1,
            &self.b_n1,
            true,
        );
        let n2 = linear_bias_relu(&n1, &self.w_n2, &self.b_n2, false);
        let out = n2.reshaped(&[b, n, 2 * nf]);
        // split into shift and raw scale
        let mut shift = Tensor::zeros(&[b, n, nf]);
        let mut scale = Tensor::zeros(&[b, n, nf]);
        for r in 0..b * n {
            shift.data_mut()[r * nf..(r + 1) * nf]
                .copy_from_slice(&out.data()[r * 2 * nf..r * 2 * nf + nf]);
            scale.data_mut()[r * nf..(r + 1) * nf]
                .copy_from_slice(&out.data()[r * 2 * nf + nf..(r + 1) * 2 * nf]);
        }
        (shift, scale.map(squash))
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Vec<f64>) {
        let s = x.shape();
        let (b, n) = (s[0], s[1]);
        let (m, inv) = self.masks(b, n);
        let xm = x.mul(&m);
        let (t_raw, s_raw) = self.conditioner(&xm);
        let t = t_raw.mul(&inv);
        let sc = s_raw.mul(&inv);
        let z = x.mul(&sc.map(f64::exp)).add(&t);
        let per = x.numel() / b;
        let ld = (0..b)
            .map(|bi| sc.data()[bi * per..(bi + 1) * per].iter().sum())
            .collect();
        (z, ld)
    }

    fn inverse(&self, z: &Tensor) -> Tensor {
        let s = z.shape();
        let (b, n) = (s[0], s[1]);
        let (m, inv) = self.masks(b, n);
        let zm = z.mul(&m);
        let (t_raw, s_raw) = self.conditioner(&zm);
        let t = t_raw.mul(&inv);
        let sc = s_raw.mul(&inv);
        z.sub(&t).mul(&sc.map(|v| (-v).exp()))
    }

    fn forward_tape(&self, tape: &mut Tape, x: NodeId, params: &[NodeId]) -> (NodeId, LdNode) {
        let s = tape.value(x).shape().to_vec();
        let (b, n, nf) = (s[0], s[1], s[2]);
        let (m, inv) = self.masks(b, n);
        let xm = tape.mul_const(x, m);
        let e1 = tape.pair_edge_affine(xm, params[0], params[1], Act::Leaky(0.0));
        let e2 = tape.linear_bias_act(e1, params[2], params[3], Act::Leaky(0.0));
        let e3 = tape.linear_bias(e2, params[4], params[5]);
        let summed = tape.sum_axis(e3, 2);
        let agg = tape.mul_scalar(summed, 1.0 / (n.max(2) as f64 - 1.0));
        let cat = tape.concat_last(xm, agg);
        let n1 = tape.linear_bias_act(cat, params[6], params[7], Act::Leaky(0.0));
        let n2 = tape.linear_bias(n1, params[8], params[9]);
        let shift = tape.slice_last(n2, 0, nf);
        let scale_raw = tape.slice_last(n2, nf, nf);
        let t = tape.mul_const(shift, inv.clone());
        let sq = squash_tape(tape, scale_raw);
        let sc = tape.mul_const(sq, inv);
        let es = tape.exp(sc);
        let scaled = tape.mul(x, es);
        let z = tape.add(scaled, t);
        let ld = tape.sum_per_sample(sc);
        (z, LdNode::PerSample(ld))
    }
}

fn concat_last_pure(a: &Tensor, b: &Tensor) -> Tensor {
    let asp = a.shape();
    let bsp = b.shape();
    let (wa, wb) = (*asp.last().unwrap(), *bsp.last().unwrap());
    let rows = a.numel() / wa;
    let mut shape = asp.to_vec();
    *shape.last_mut().unwrap() = wa + wb;
    let mut out = Tensor::zeros(&shape);
    for r in 0..rows {
        let base = r * (wa + wb);
        out.data_mut()[base..base + wa].copy_from_slice(&a.data()[r * wa..(r + 1) * wa]);
        out.data_mut()[base + wa..base + wa + wb]
            .copy_from_slice(&b.data()[r * wb..(r + 1) * wb]);
    }
    out
}

fn linear_bias_relu(x: &Tensor, w: &Tensor, b: &Tensor, relu: bool) -> Tensor {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / cin;
    let act = if relu { Act::Leaky(0.0) } else { Act::Linear };
    let y = gemm::matmul_bias_act(x.data(), w.data(), Some(b.data()), act, rows, cin, cout);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::from_vec(&shape, y)
}

/// Affine coupling on flat vectors with a four-layer leaky-rectifier MLP
/// conditioner; the baseline that ignores graph structure.
#[derive(Clone, Debug)]
pub struct FlatCoupling {
    pub mask: Tensor,
    pub hidden: usize,
    parity: bool,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl FlatCoupling {
    pub fn init(kind: &ModelKind, parity: bool, hidden: usize, rng: &mut Rng) -> FlatCoupling {
        let ModelKind::Flat { d } = *kind else {
            panic!("flat coupling needs a flat layout");
        };
        assert!(d >= 2);
        let mut mask = Tensor::zeros(&[d]);
        let half = d / 2;
        for f in 0..d {
            if (f < half) ^ parity {
                mask.data_mut()[f] = 1.0;
            }
        }
        let glorot = |rng: &mut Rng, rows: usize, cols: usize| {
            Tensor::randn(rng, &[rows, cols], (2.0 / (rows + cols) as f64).sqrt())
        };
        let weights = vec![
            glorot(rng, d, hidden),
            glorot(rng, hidden, hidden),
            glorot(rng, hidden, hidden),
            Tensor::zeros(&[hidden, 2 * d]),
        ];
        let biases = vec![
            Tensor::zeros(&[hidden]),
            Tensor::zeros(&[hidden]),
            Tensor::zeros(&[hidden]),
            Tensor::zeros(&[2 * d]),
        ];
        FlatCoupling {
            mask,
            hidden,
            parity,
            weights,
            biases,
        }
    }

    pub fn mask_parity(&self) -> bool {
        self.parity
    }

    fn masks(&self, b: usize) -> (Tensor, Tensor) {
        let d = self.mask.numel();
        let mut m = Tensor::zeros(&[b, d]);
        for r in 0..b {
            m.data_mut()[r * d..(r + 1) * d].copy_from_slice(self.mask.data());
        }
        let inv = m.map(|v| 1.0 - v);
        (m, inv)
    }

    fn conditioner(&self, xm: &Tensor) -> (Tensor, Tensor) {
        let d = self.mask.numel();
        let b = xm.shape()[0];
        let mut h = xm.clone();
        for layer in 0..4 {
            let last = layer == 3;
            h = linear_bias_leaky(&h, &self.weights[layer], &self.biases[layer], !last);
        }
        let mut shift = Tensor::zeros(&[b, d]);
        let mut scale = Tensor::zeros(&[b, d]);
        for r in 0..b {
            shift.data_mut()[r * d..(r + 1) * d]
                .copy_from_slice(&h.data()[r * 2 * d..r * 2 * d + d]);
            scale.data_mut()[r * d..(r + 1) * d]
                .copy_from_slice(&h.data()[r * 2 * d + d..(r + 1) * 2 * d]);
        }
        (shift, scale.map(squash))
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Vec<f64>) {
        let b = x.shape()[0];
        let (m, inv) = self.masks(b);
        let xm = x.mul(&m);
        let (t_raw, s_raw) = self.conditioner(&xm);
        let t = t_raw.mul(&inv);
        let sc = s_raw.mul(&inv);
        let z = x.mul(&sc.map(f64::exp)).add(&t);
        let per = x.numel() / b;
        let ld = (0..b)
            .map(|bi| sc.data()[bi * per..(bi + 1) * per].iter().sum())
            .collect();
        (z, ld)
    }

    fn inverse(&self, z: &Tensor) -> Tensor {
        let b = z.shape()[0];
        let (m, inv) = self.masks(b);
        let zm = z.mul(&m);
        let (t_raw, s_raw) = self.conditioner(&zm);
        let t = t_raw.mul(&inv);
        let sc = s_raw.mul(&inv);
        z.sub(&t).mul(&sc.map(|v| (-v).exp()))
    }

    fn forward_tape(&self, tape: &mut Tape, x: NodeId, params: &[NodeId]) -> (NodeId, LdNode) {
        let s = tape.value(x).shape().to_vec();
        let (b, d) = (s[0], s[1]);
        let (m, inv) = self.masks(b);
        let xm = tape.mul_const(x, m);
        let mut h = xm;
        for layer in 0..4 {
            let act = if layer < 3 { Act::Leaky(0.01) } else { Act::Linear };
            h = tape.linear_bias_act(h, params[2 * layer], params[2 * layer + 1], act);
        }
        let shift = tape.slice_last(h, 0, d);
        let scale_raw = tape.slice_last(h, d, d);
        let t = tape.mul_const(shift, inv.clone());
        let sq = squash_tape(tape, scale_raw);
        let sc = tape.mul_const(sq, inv);
        let es = tape.exp(sc);
        let scaled = tape.mul(x, es);
        let z = tape.add(scaled, t);
        let ld = tape.sum_per_sample(sc);
        (z, LdNode::PerSample(ld))
    }
}

fn linear_bias_leaky(x: &Tensor, w: &Tensor, b: &Tensor, leaky: bool) -> Tensor {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / cin;
    let act = if leaky { Act::Leaky(0.01) } else { Act::Linear };
    let y = gemm::matmul_bias_act(x.data(), w.data(), Some(b.data()), act, rows, cin, cout);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::from_vec(&shape, y)
}

// ---------------------------------------------------------------------------
// Layer and model
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum Layer {
    ActNorm(ActNormLayer),
    Mix1x1(Mix1x1Layer),
    ConvExp(ConvExpLayer),
    GclExp(GclExpLayer),
    CouplingImage(ImageCoupling),
    CouplingGraph(GraphCoupling),
    CouplingFlat(FlatCoupling),
    Sylvester(SylvesterLayer),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::ActNorm(_) => "actnorm",
            Layer::Mix1x1(_) => "mix1x1",
            Layer::ConvExp(_) => "conv_exp",
            Layer::GclExp(_) => "gcl_exp",
            Layer::CouplingImage(_) => "coupling_image",
            Layer::CouplingGraph(_) => "coupling_graph",
            Layer::CouplingFlat(_) => "coupling_flat",
            Layer::Sylvester(_) => "sylvester",
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        match self {
            Layer::ActNorm(l) => vec![l.log_scale.clone(), l.bias.clone()],
            Layer::Mix1x1(l) => vec![l.weight.clone()],
            Layer::ConvExp(l) => vec![l.kernel.weights.clone()],
            Layer::GclExp(l) => vec![l.theta0.clone(), l.theta1.clone()],
            Layer::CouplingImage(l) => vec![
                l.w_in.clone(),
                l.b_in.clone(),
                l.w_shift.clone(),
                l.b_shift.clone(),
                l.w_scale.clone(),
                l.b_scale.clone(),
            ],
            Layer::CouplingGraph(l) => vec![
                l.w_e1.clone(),
                l.b_e1.clone(),
                l.w_e2.clone(),
                l.b_e2.clone(),
                l.w_e3.clone(),
                l.b_e3.clone(),
                l.w_n1.clone(),
                l.b_n1.clone(),
                l.w_n2.clone(),
                l.b_n2.clone(),
            ],
            Layer::CouplingFlat(l) => {
                let mut ps = Vec::new();
                for i in 0..4 {
                    ps.push(l.weights[i].clone());
                    ps.push(l.biases[i].clone());
                }
                ps
            }
            Layer::Sylvester(l) => l.params(),
        }
    }

    pub fn set_params(&mut self, ps: &[Tensor]) {
        match self {
            Layer::ActNorm(l) => {
                l.log_scale = ps[0].clone();
                l.bias = ps[1].clone();
            }
            Layer::Mix1x1(l) => l.weight = ps[0].clone(),
            Layer::ConvExp(l) => l.kernel.weights = ps[0].clone(),
            Layer::GclExp(l) => {
                l.theta0 = ps[0].clone();
                l.theta1 = ps[1].clone();
            }
            Layer::CouplingImage(l) => {
                l.w_in = ps[0].clone();
                l.b_in = ps[1].clone();
                l.w_shift = ps[2].clone();
                l.b_shift = ps[3].clone();
                l.w_scale = ps[4].clone();
                l.b_scale = ps[5].clone();
            }
            Layer::CouplingGraph(l) => {
                l.w_e1 = ps[0].clone();
                l.b_e1 = ps[1].clone();
                l.w_e2 = ps[2].clone();
                l.b_e2 = ps[3].clone();
                l.w_e3 = ps[4].clone();
                l.b_e3 = ps[5].clone();
                l.w_n1 = ps[6].clone();
                l.b_n1 = ps[7].clone();
                l.w_n2 = ps[8].clone();
                l.b_n2 = ps[9].clone();
            }
            Layer::CouplingFlat(l) => {
                for i in 0..4 {
                    l.weights[i] = ps[2 * i].clone();
                    l.biases[i] = ps[2 * i + 1].clone();
                }
            }
            Layer::Sylvester(l) => l.set_params(ps),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Layer::ActNorm(_) => 2,
            Layer::Mix1x1(_) => 1,
            Layer::ConvExp(_) => 1,
            Layer::GclExp(_) => 2,
            Layer::CouplingImage(_) => 6,
            Layer::CouplingGraph(_) => 10,
            Layer::CouplingFlat(_) => 8,
            Layer::Sylvester(l) => l.num_params(),
        }
    }

    pub fn refresh_certificates(&mut self, iters: usize) {
        match self {
            Layer::ConvExp(l) => {
                l.kernel.refresh_certificate(iters);
            }
            Layer::GclExp(l) => l.refresh_certificates(iters),
            Layer::Sylvester(l) => l.refresh_certificates(iters),
            _ => {}
        }
    }
}

/// Report of a model inverse pass.
pub struct InverseReport {
    pub x: Tensor,
    pub max_fixed_point_iters: usize,
    pub all_converged: bool,
}

#[derive(Debug)]
pub struct FlowModel {
    pub kind: ModelKind,
    pub layers: Vec<Layer>,
    ahat: Option<Tensor>,
}

impl FlowModel {
    pub fn new(kind: ModelKind, layers: Vec<Layer>) -> FlowModel {
        let ahat = kind.fully_connected_ahat();
        FlowModel { kind, layers, ahat }
    }

    pub fn check_batch(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        let expect = self.kind.sample_shape();
        if s.len() != expect.len() + 1 || s[1..] != expect[..] {
            return Err(Error::ShapeMismatch(format!(
                "batch shape {:?} does not match model {:?}",
                s, expect
            )));
        }
        Ok(s[0])
    }

    /// Applies layers in order, accumulating per-sample log-determinants.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let b = self.check_batch(x)?;
        let mut cur = x.clone();
        let mut logdet = vec![0.0; b];
        for (li, layer) in self.layers.iter().enumerate() {
            let (next, ld) = match layer {
                Layer::ActNorm(l) => l.forward(&self.kind, &cur),
                Layer::Mix1x1(l) => l.forward(&self.kind, &cur)?,
                Layer::ConvExp(l) => l.forward(&self.kind, &cur),
                Layer::GclExp(l) => l.forward(&self.kind, self.ahat.as_ref().unwrap(), &cur),
                Layer::CouplingImage(l) => l.forward(&cur),
                Layer::CouplingGraph(l) => l.forward(&cur),
                Layer::CouplingFlat(l) => l.forward(&cur),
                Layer::Sylvester(l) => l.forward(&cur)?,
            };
            if !next.is_finite() {
                return Err(Error::NonFinite(format!(
                    "forward output of layer {li} ({})",
                    layer.name()
                )));
            }
            cur = next;
            for (acc, l) in logdet.iter_mut().zip(&ld) {
                *acc += l;
            }
        }
        Ok((cur, logdet))
    }

    /// Applies layer inverses in reverse order.
    pub fn inverse(&self, z: &Tensor, fp: &FixedPointConfig) -> Result<InverseReport> {
        self.check_batch(z)?;
        let mut cur = z.clone();
        let mut max_iters = 0;
        let mut all_converged = true;
        for layer in self.layers.iter().rev() {
            cur = match layer {
                Layer::ActNorm(l) => l.inverse(&self.kind, &cur),
                Layer::Mix1x1(l) => l.inverse(&self.kind, &cur)?,
                Layer::ConvExp(l) => l.inverse(&cur),
                Layer::GclExp(l) => l.inverse(self.ahat.as_ref().unwrap(), &cur),
                Layer::CouplingImage(l) => l.inverse(&cur),
                Layer::CouplingGraph(l) => l.inverse(&cur),
                Layer::CouplingFlat(l) => l.inverse(&cur),
                Layer::Sylvester(l) => {
                    let (x, report) = l.inverse(&cur, fp)?;
                    max_iters = max_iters.max(report.iters_used);
                    all_converged &= report.converged;
                    x
                }
            };
        }
        Ok(InverseReport {
            x: cur,
            max_fixed_point_iters: max_iters,
            all_converged,
        })
    }

    /// Tape forward; `params` must follow [`Self::params`] order. Returns
    /// the output node and a per-sample log-determinant node.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x: NodeId,
        params: &[NodeId],
    ) -> Result<(NodeId, NodeId)> {
        let b = tape.value(x).shape()[0];
        let mut cur = x;
        let mut per_sample: Option<NodeId> = None;
        let mut scalars: Option<NodeId> = None;
        let mut offset = 0;
        for layer in &self.layers {
            let n = layer.num_params();
            let ps = &params[offset..offset + n];
            offset += n;
            let (next, ld) = match layer {
                Layer::ActNorm(l) => l.forward_tape(&self.kind, tape, cur, ps),
                Layer::Mix1x1(l) => l.forward_tape(&self.kind, tape, cur, ps)?,
                Layer::ConvExp(l) => l.forward_tape(&self.kind, tape, cur, ps),
                Layer::GclExp(l) => {
                    l.forward_tape(&self.kind, self.ahat.as_ref().unwrap(), tape, cur, ps)
                }
                Layer::CouplingImage(l) => l.forward_tape(tape, cur, ps),
                Layer::CouplingGraph(l) => l.forward_tape(tape, cur, ps),
                Layer::CouplingFlat(l) => l.forward_tape(tape, cur, ps),
                Layer::Sylvester(l) => {
                    let (z, ld) = l.forward_tape(tape, cur, ps)?;
                    (z, LdNode::PerSample(ld))
                }
            };
            cur = next;
            match ld {
                LdNode::Scalar(s) => {
                    scalars = Some(match scalars {
                        Some(acc) => tape.add(acc, s),
                        None => s,
                    });
                }
                LdNode::PerSample(p) => {
                    per_sample = Some(match per_sample {
                        Some(acc) => tape.add(acc, p),
                        None => p,
                    });
                }
            }
        }
        let logdet = match (per_sample, scalars) {
            (Some(p), Some(s)) => tape.add_scalar_node(p, s),
            (Some(p), None) => p,
            (None, Some(s)) => {
                let zeros = tape.constant(Tensor::zeros(&[b]));
                tape.add_scalar_node(zeros, s)
            }
            (None, None) => tape.constant(Tensor::zeros(&[b])),
        };
        Ok((cur, logdet))
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }

    pub fn set_params(&mut self, ps: &[Tensor]) {
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.num_params();
            layer.set_params(&ps[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, ps.len());
    }

    pub fn refresh_certificates(&mut self, iters: usize) {
        for layer in &mut self.layers {
            layer.refresh_certificates(iters);
        }
    }

    /// Data-dependent initialization of every actnorm layer: each one sees
    /// the batch as transformed by the layers before it.
    pub fn initialize_actnorm(&mut self, batch: &Tensor) -> Result<()> {
        let b = self.check_batch(batch)?;
        let _ = b;
        let mut cur = batch.clone();
        let kind = self.kind;
        let ahat = self.ahat.clone();
        for layer in &mut self.layers {
            if let Layer::ActNorm(l) = layer {
                l.initialize_from(&kind, &cur);
            }
            let (next, _) = match layer {
                Layer::ActNorm(l) => l.forward(&kind, &cur),
                Layer::Mix1x1(l) => l.forward(&kind, &cur)?,
                Layer::ConvExp(l) => l.forward(&kind, &cur),
                Layer::GclExp(l) => l.forward(&kind, ahat.as_ref().unwrap(), &cur),
                Layer::CouplingImage(l) => l.forward(&cur),
                Layer::CouplingGraph(l) => l.forward(&cur),
                Layer::CouplingFlat(l) => l.forward(&cur),
                Layer::Sylvester(l) => l.forward(&cur)?,
            };
            cur = next;
        }
        Ok(())
    }

    /// log N(z; 0, I) per sample.
    pub fn base_logp(&self, z: &Tensor) -> Vec<f64> {
        let b = z.shape()[0];
        let d = self.kind.dims() as f64;
        let per = z.numel() / b;
        (0..b)
            .map(|bi| {
                let ss: f64 = z.data()[bi * per..(bi + 1) * per]
                    .iter()
                    .map(|v| v * v)
                    .sum();
                -0.5 * ss - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
            })
            .collect()
    }

    /// Mean negative log-likelihood in nats per sample (total over
    /// dimensions; divide by node count for the per-node convention).
    pub fn nll(&self, batch: &Tensor) -> Result<f64> {
        let b = self.check_batch(batch)?;
        let (z, logdet) = self.forward(batch)?;
        let logp = self.base_logp(&z);
        let mut acc = 0.0;
        for i in 0..b {
            let v = logp[i] + logdet[i];
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("log-likelihood of sample {i}")));
            }
            acc += v;
        }
        Ok(-acc / b as f64)
    }

    /// Per-node NLL for graph models, plain NLL otherwise.
    pub fn per_node_nll(&self, batch: &Tensor) -> Result<f64> {
        let nll = self.nll(batch)?;
        Ok(match self.kind {
            ModelKind::Graph { n, .. } => nll / n as f64,
            _ => nll,
        })
    }

    /// Builds the mean-NLL loss node on a tape.
    pub fn nll_loss_tape(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        params: &[NodeId],
    ) -> Result<NodeId> {
        let b = self.check_batch(batch)?;
        let x = tape.constant(batch.clone());
        let (z, logdet) = self.forward_tape(tape, x, params)?;
        let d = self.kind.dims() as f64;
        let zz = tape.mul(z, z);
        let ss = tape.sum_per_sample(zz);
        let half = tape.mul_scalar(ss, -0.5);
        let logp = tape.add_scalar(half, -0.5 * d * (2.0 * std::f64::consts::PI).ln());
        let joint = tape.add(logp, logdet);
        let total = tape.sum_all(joint);
        Ok(tape.mul_scalar(total, -1.0 / b as f64))
    }

    /// Draws samples by pulling base noise through the inverse.
    pub fn sample(&self, rng: &mut Rng, count: usize, fp: &FixedPointConfig) -> Result<Tensor> {
        let z = Tensor::randn(rng, &self.kind.batch_shape(count), 1.0);
        Ok(self.inverse(&z, fp)?.x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::tensor::permute_nodes;

    fn graph_model(rng: &mut Rng, with_exp: bool, n: usize, nf: usize) -> FlowModel {
        let kind = ModelKind::Graph { n, nf };
        let mut layers = Vec::new();
        for sub in 0..3 {
            layers.push(Layer::ActNorm(ActNormLayer::identity(nf)));
            layers.push(Layer::Mix1x1(Mix1x1Layer::identity(nf)));
            if with_exp {
                layers.push(Layer::GclExp(GclExpLayer::init(&kind, rng)));
            }
            layers.push(Layer::CouplingGraph(GraphCoupling::init(
                &kind,
                sub % 2 == 1,
                16,
                8,
                rng,
            )));
        }
        FlowModel::new(kind, layers)
    }

    fn randomize(model: &mut FlowModel, rng: &mut Rng, scale: f64) {
        let mut ps = model.params();
        for p in &mut ps {
            let noise = Tensor::randn(rng, p.shape(), scale);
            *p = p.add(&noise);
        }
        model.set_params(&ps);
        model.refresh_certificates(200);
    }

    #[test]
    fn empty_model_is_identity() {
        let kind = ModelKind::Flat { d: 4 };
        let model = FlowModel::new(kind, vec![]);
        let mut rng = Rng::seeded(100);
        let x = Tensor::randn(&mut rng, &[3, 4], 1.0);
        let (z, ld) = model.forward(&x).unwrap();
        assert_eq!(z, x);
        assert!(ld.iter().all(|&l| l == 0.0));
        let back = model.inverse(&x, &FixedPointConfig::default()).unwrap();
        assert_eq!(back.x, x);
    }

    #[test]
    fn single_conv_exp_layer_logdet() {
        let mut rng = Rng::seeded(101);
        let kind = ModelKind::Image { c: 1, h: 4, w: 4 };
        let mut layer = ConvExpLayer::init(&kind, &mut rng);
        layer.kernel.weights = Tensor::randn(&mut rng, &[1, 1, 3, 3], 0.1);
        layer.kernel.refresh_certificate(100);
        let expected_ld = 16.0 * center_diag_sum(&layer.kernel.effective_weights());
        let model = FlowModel::new(kind, vec![Layer::ConvExp(layer)]);
        let x = Tensor::randn(&mut rng, &[2, 1, 4, 4], 1.0);
        let (_, ld) = model.forward(&x).unwrap();
        for l in ld {
            assert!((l - expected_ld).abs() < 1e-12);
        }
    }

    #[test]
    fn actnorm_initialization_normalizes() {
        let mut rng = Rng::seeded(102);
        let kind = ModelKind::Graph { n: 4, nf: 2 };
        let mut model = FlowModel::new(kind, vec![Layer::ActNorm(ActNormLayer::identity(2))]);
        let mut x = Tensor::randn(&mut rng, &[64, 4, 2], 1.0);
        // give the features distinct offsets and scales
        for bi in 0..64 {
            for nd in 0..4 {
                x.data_mut()[(bi * 4 + nd) * 2] = x.data()[(bi * 4 + nd) * 2] * 3.0 + 5.0;
                x.data_mut()[(bi * 4 + nd) * 2 + 1] =
                    x.data()[(bi * 4 + nd) * 2 + 1] * 0.2 - 1.0;
            }
        }
        model.initialize_actnorm(&x).unwrap();
        let (z, _) = model.forward(&x).unwrap();
        for f in 0..2 {
            let vals: Vec<f64> = (0..64 * 4).map(|r| z.data()[r * 2 + f]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "feature {f} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "feature {f} std {}", var.sqrt());
        }
    }

    #[test]
    fn graph_model_round_trip_and_tape_consistency() {
        let mut rng = Rng::seeded(103);
        let mut model = graph_model(&mut rng, true, 4, 2);
        randomize(&mut model, &mut rng, 0.2);
        let x = Tensor::randn(&mut rng, &[5, 4, 2], 1.0);
        let (z, ld) = model.forward(&x).unwrap();
        let back = model.inverse(&z, &FixedPointConfig::default()).unwrap();
        // T = 6 series truncation leaves a small exp/−exp mismatch
        assert!(back.x.max_abs_diff(&x) < 1e-3, "round trip {}", back.x.max_abs_diff(&x));
        // tape forward must equal pure forward
        let mut tape = Tape::new();
        let pids: Vec<NodeId> = model.params().iter().map(|p| tape.param(p.clone())).collect();
        let xn = tape.constant(x.clone());
        let (zn, ldn) = model.forward_tape(&mut tape, xn, &pids).unwrap();
        assert!(tape.value(zn).max_abs_diff(&z) < 1e-12);
        for (i, l) in ld.iter().enumerate() {
            assert!((tape.value(ldn).data()[i] - l).abs() < 1e-10);
        }
    }

    #[test]
    fn composed_logdet_matches_dense_jacobian() {
        let mut rng = Rng::seeded(104);
        let mut model = graph_model(&mut rng, true, 4, 2);
        randomize(&mut model, &mut rng, 0.2);
        let x = Tensor::randn(&mut rng, &[1, 4, 2], 1.0);
        let (_, ld) = model.forward(&x).unwrap();
        let d = 8;
        let eps = 1e-5;
        let mut jac = DenseMatrix::zeros(d, d);
        for j in 0..d {
            let mut up = x.clone();
            up.data_mut()[j] += eps;
            let mut dn = x.clone();
            dn.data_mut()[j] -= eps;
            let (zu, _) = model.forward(&up).unwrap();
            let (zd, _) = model.forward(&dn).unwrap();
            for i in 0..d {
                jac.set(i, j, (zu.data()[i] - zd.data()[i]) / (2.0 * eps));
            }
        }
        let (numeric, _) = logdet_via_lu(&jac).unwrap();
        assert!(
            (ld[0] - numeric).abs() < 1e-4,
            "analytic {} vs numeric {numeric}",
            ld[0]
        );
    }

    #[test]
    fn graph_nll_permutation_invariant() {
        let mut rng = Rng::seeded(105);
        // equivariant subset: gcl-exponential, per-feature actnorm,
        // feature-split coupling
        let kind = ModelKind::Graph { n: 4, nf: 2 };
        let mut layers = Vec::new();
        for sub in 0..2 {
            layers.push(Layer::ActNorm(ActNormLayer::identity(2)));
            layers.push(Layer::GclExp(GclExpLayer::init(&kind, &mut rng)));
            layers.push(Layer::CouplingGraph(GraphCoupling::init(
                &kind,
                sub % 2 == 1,
                16,
                8,
                &mut rng,
            )));
        }
        let mut model = FlowModel::new(kind, layers);
        randomize(&mut model, &mut rng, 0.3);
        let x = Tensor::randn(&mut rng, &[1, 4, 2], 1.0);
        let base = model.nll(&x).unwrap();
        for _ in 0..8 {
            let perm = rng.permutation(4);
            let permuted = permute_nodes(&x.reshaped(&[4, 2]), &perm).reshaped(&[1, 4, 2]);
            let nll = model.nll(&permuted).unwrap();
            assert!(
                (nll - base).abs() < 1e-9,
                "permuted nll {nll} vs base {base}"
            );
        }
    }

    #[test]
    fn identity_model_nll_values() {
        let kind = ModelKind::Flat { d: 6 };
        let model = FlowModel::new(kind, vec![]);
        // x = 0: NLL = d/2 · ln(2π)
        let x = Tensor::zeros(&[1, 6]);
        let nll = model.nll(&x).unwrap();
        let expect = 3.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((nll - expect).abs() < 1e-12);
        // base samples: NLL approaches the Gaussian entropy d/2·(ln 2π + 1)
        let mut rng = Rng::seeded(106);
        let z = Tensor::randn(&mut rng, &[20000, 6], 1.0);
        let nll = model.nll(&z).unwrap();
        let entropy = 3.0 * ((2.0 * std::f64::consts::PI).ln() + 1.0);
        assert!((nll - entropy).abs() < 0.05, "nll {nll} vs entropy {entropy}");
    }

    #[test]
    fn flat_and_image_models_round_trip() {
        let mut rng = Rng::seeded(107);
        // flat stack
        let kind = ModelKind::Flat { d: 8 };
        let mut layers = Vec::new();
        for sub in 0..2 {
            layers.push(Layer::ActNorm(ActNormLayer::identity(8)));
            layers.push(Layer::Mix1x1(Mix1x1Layer::identity(8)));
            layers.push(Layer::CouplingFlat(FlatCoupling::init(
                &kind,
                sub % 2 == 1,
                32,
                &mut rng,
            )));
        }
        let mut model = FlowModel::new(kind, layers);
        randomize(&mut model, &mut rng, 0.2);
        let x = Tensor::randn(&mut rng, &[4, 8], 1.0);
        let (z, _) = model.forward(&x).unwrap();
        let back = model.inverse(&z, &FixedPointConfig::default()).unwrap();
        assert!(back.x.max_abs_diff(&x) < 1e-9);

        // image stack with conv exp, sylvester and checkerboard coupling
        let kind = ModelKind::Image { c: 1, h: 4, w: 4 };
        let mut layers = vec![
            Layer::ActNorm(ActNormLayer::identity(1)),
            Layer::ConvExp(ConvExpLayer::init(&kind, &mut rng)),
            Layer::Sylvester(SylvesterLayer::init_conv(&[1, 4, 4], 8, 2, 0, &mut rng)),
            Layer::CouplingImage(ImageCoupling::init(
                &kind,
                ImageMask::Checkerboard,
                false,
                8,
                &mut rng,
            )),
        ];
        // exercise non-trivial parameters
        for layer in &mut layers {
            let mut ps = layer.params();
            for p in &mut ps {
                let noise = Tensor::randn(&mut rng, p.shape(), 0.15);
                *p = p.add(&noise);
            }
            layer.set_params(&ps);
            layer.refresh_certificates(200);
        }
        let model = FlowModel::new(kind, layers);
        let x = Tensor::randn(&mut rng, &[3, 1, 4, 4], 1.0);
        let (z, _) = model.forward(&x).unwrap();
        let back = model
            .inverse(&z, &FixedPointConfig::default())
            .unwrap();
        assert!(back.all_converged);
        assert!(back.x.max_abs_diff(&x) < 1e-3, "{}", back.x.max_abs_diff(&x));
    }

    #[test]
    fn full_stack_gradcheck() {
        let mut rng = Rng::seeded(108);
        let kind = ModelKind::Image { c: 1, h: 3, w: 3 };
        let mut layers = vec![
            Layer::ActNorm(ActNormLayer::identity(1)),
            Layer::ConvExp(ConvExpLayer::init(&kind, &mut rng)),
            Layer::Sylvester(SylvesterLayer::init_conv(&[1, 3, 3], 6, 2, 0, &mut rng)),
            Layer::CouplingImage(ImageCoupling::init(
                &kind,
                ImageMask::Checkerboard,
                false,
                6,
                &mut rng,
            )),
        ];
        for layer in &mut layers {
            let mut ps = layer.params();
            for p in &mut ps {
                let noise = Tensor::randn(&mut rng, p.shape(), 0.2);
                *p = p.add(&noise);
            }
            layer.set_params(&ps);
            layer.refresh_certificates(300);
        }
        let model = FlowModel::new(kind, layers);
        let batch = Tensor::randn(&mut rng, &[2, 1, 3, 3], 1.0);
        let params = model.params();
        let err = gradcheck(
            |tape, ids| model.nll_loss_tape(tape, &batch, ids),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "full stack gradcheck {err:.3e}");
    }
}
