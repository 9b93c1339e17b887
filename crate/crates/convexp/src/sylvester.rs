//! Generalized Sylvester flow layers.
//!
//! The transform is z = x + W⁻¹ f(W x) with an invertible basis W and a
//! constrained autoregressive residual f. For the convolutional variant
//! W = exp(M)·Q: a convolution exponential composed with an orthogonal
//! Householder 1×1 map, and f is built from masked convolutions. Because f
//! is autoregressive with diagonal Jacobian entries bounded inside (−γ, γ),
//! the determinant is Π(1 + ∂f_i/∂u_i) regardless of W, and the inverse is
//! a fixed-point iteration u ← v − f(u) that contracts one dimension at a
//! time.
//!
//! Autoregressive ordering is channel-major within raster-scan spatial
//! order: position (c, y, x) has index (y·w + x)·C + c.

use crate::autodiff::{NodeId, Tape};
use crate::convops::{self, Padding};
use crate::error::{Error, Result};
use crate::expseries::term_bound;
use crate::linop::cap_factor;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Mask for an autoregressive convolution, channel groups assigned
/// round-robin against the signal channel count. `strict` excludes the
/// current position (first layer); otherwise the current group may feed
/// itself (later layers and heads).
pub fn ar_conv_mask(
    out_ch: usize,
    in_ch: usize,
    signal_channels: usize,
    kh: usize,
    kw: usize,
    strict: bool,
) -> Tensor {
    assert!(kh % 2 == 1 && kw % 2 == 1);
    let (my, mx) = (kh / 2, kw / 2);
    let mut mask = Tensor::zeros(&[out_ch, in_ch, kh, kw]);
    let md = mask.data_mut();
    for o in 0..out_ch {
        let og = o % signal_channels;
        for i in 0..in_ch {
            let ig = i % signal_channels;
            for dy in 0..kh {
                for dx in 0..kw {
                    let allowed = if dy < my || (dy == my && dx < mx) {
                        true
                    } else if dy == my && dx == mx {
                        if strict {
                            ig < og
                        } else {
                            ig <= og
                        }
                    } else {
                        false
                    };
                    if allowed {
                        md[((o * in_ch + i) * kh + dy) * kw + dx] = 1.0;
                    }
                }
            }
        }
    }
    mask
}

/// Masked convolution with a persistent spectral certificate.
///
/// The effective kernel is weights·factor ⊙ mask where the factor caps the
/// operator norm at `lipschitz_cap`; refreshing runs power iteration on the
/// masked operator as applied (padding included).
#[derive(Clone, Debug)]
pub struct MaskedConv {
    pub weights: Tensor,
    pub bias: Tensor,
    mask: Tensor,
    padding: Padding,
    lipschitz_cap: f64,
    power_vec: Tensor,
    factor: f64,
}

impl MaskedConv {
    fn new(
        weights: Tensor,
        mask: Tensor,
        input_shape: &[usize; 3],
        lipschitz_cap: f64,
    ) -> MaskedConv {
        let out_ch = weights.shape()[0];
        let mut rng = Rng::seeded(0x51ab_c0de);
        let mut v = Tensor::randn(&mut rng, &[input_shape[0], input_shape[1], input_shape[2]], 1.0);
        let n = v.l2_norm();
        if n > 0.0 {
            v = v.scale(1.0 / n);
        }
        MaskedConv {
            bias: Tensor::zeros(&[out_ch]),
            weights,
            mask,
            padding: Padding::Zero,
            lipschitz_cap,
            power_vec: v,
            factor: 1.0,
        }
    }

    pub fn masked_weights(&self) -> Tensor {
        self.weights.mul(&self.mask)
    }

    fn effective_weights(&self) -> Tensor {
        self.masked_weights().scale(self.factor)
    }

    /// Power iteration on the masked operator; updates the cached scale
    /// factor min(1, cap/σ) and returns σ.
    pub fn refresh_certificate(&mut self, iters: usize) -> f64 {
        let k = self.masked_weights();
        let shape = self.power_vec.shape().to_vec();
        let mut sigma = 0.0;
        for _ in 0..iters {
            let lifted = self
                .power_vec
                .reshaped(&[1, shape[0], shape[1], shape[2]]);
            let mv = convops::conv2d_batch(&lifted, &k, self.padding);
            sigma = mv.l2_norm();
            if sigma < 1e-12 {
                self.factor = 1.0;
                return 0.0;
            }
            let back = convops::conv2d_transpose_batch(&mv, &k, self.padding);
            let n = back.l2_norm();
            if n < 1e-300 {
                self.factor = 1.0;
                return 0.0;
            }
            self.power_vec = back.reshaped(&shape).scale(1.0 / n);
        }
        self.factor = cap_factor(self.lipschitz_cap, sigma);
        sigma
    }

    /// Certified σ of the effective (scaled) kernel.
    pub fn certified_sigma(&mut self, iters: usize) -> f64 {
        let raw = self.refresh_certificate(iters);
        raw * self.factor
    }

    fn apply_pure(&self, x: &Tensor) -> Tensor {
        let y = convops::conv2d_batch(x, &self.effective_weights(), self.padding);
        add_channel_bias(&y, &self.bias)
    }

    fn apply_tape(&self, tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let scaled = tape.mul_scalar(w, self.factor);
        let y = tape.conv2d(x, scaled, self.padding, Some(self.mask.clone()));
        let shape = tape.value(y).shape().to_vec();
        let bb = tape.broadcast_axis(b, &shape, 1);
        tape.add(y, bb)
    }
}

fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = x.clone();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let add = bias.data()[ci];
            for v in &mut od[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                *v += add;
            }
        }
    }
    out
}

/// Masked conditioner producing the four head maps s1, s2, t1, t2 from a
/// shared trunk. The first trunk layer is strictly masked, later layers and
/// the 1×1 heads allow the current group, so head outputs never see the
/// current or any future position. s1 and s2 carry a final tanh.
#[derive(Clone, Debug)]
pub struct MaskedArNet {
    pub channels: usize,
    pub hidden: usize,
    pub height: usize,
    pub width: usize,
    pub trunk: Vec<MaskedConv>,
    /// s1, s2, t1, t2
    pub heads: Vec<MaskedConv>,
}

pub const HEAD_COUNT: usize = 4;

impl MaskedArNet {
    /// Trunk of `depth` masked 3×3 convolutions feeding four zero-initialized
    /// 1×1 heads; trunk weights start small so certificates begin loose.
    pub fn init(
        channels: usize,
        hidden: usize,
        depth: usize,
        height: usize,
        width: usize,
        rng: &mut Rng,
    ) -> MaskedArNet {
        assert!(depth >= 1);
        let mut trunk = Vec::with_capacity(depth);
        for layer in 0..depth {
            let (in_ch, strict) = if layer == 0 {
                (channels, true)
            } else {
                (hidden, false)
            };
            let w = Tensor::randn(rng, &[hidden, in_ch, 3, 3], 0.05);
            let mask = ar_conv_mask(hidden, in_ch, channels, 3, 3, strict);
            trunk.push(MaskedConv::new(w, mask, &[in_ch, height, width], 1.5));
        }
        let heads = (0..HEAD_COUNT)
            .map(|_| {
                let w = Tensor::zeros(&[channels, hidden, 1, 1]);
                let mask = ar_conv_mask(channels, hidden, channels, 1, 1, false);
                MaskedConv::new(w, mask, &[hidden, height, width], 1.5)
            })
            .collect();
        MaskedArNet {
            channels,
            hidden,
            height,
            width,
            trunk,
            heads,
        }
    }

    pub fn signal_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn refresh_certificates(&mut self, iters: usize) {
        for conv in self.trunk.iter_mut().chain(self.heads.iter_mut()) {
            conv.refresh_certificate(iters);
        }
    }

    /// Head outputs (s1, s2, t1, t2) for a batched input [b, c, h, w].
    pub fn heads_pure(&self, u: &Tensor) -> [Tensor; HEAD_COUNT] {
        let mut h = u.clone();
        for conv in &self.trunk {
            h = conv.apply_pure(&h).map(f64::tanh);
        }
        let mut out: Vec<Tensor> = Vec::with_capacity(HEAD_COUNT);
        for (i, head) in self.heads.iter().enumerate() {
            let raw = head.apply_pure(&h);
            out.push(if i < 2 { raw.map(f64::tanh) } else { raw });
        }
        out.try_into().unwrap()
    }

    fn heads_tape(&self, tape: &mut Tape, u: NodeId, params: &[NodeId]) -> [NodeId; HEAD_COUNT] {
        let mut idx = 0;
        let mut h = u;
        for conv in &self.trunk {
            let hc = conv.apply_tape(tape, h, params[idx], params[idx + 1]);
            idx += 2;
            h = tape.tanh(hc);
        }
        let mut out = Vec::with_capacity(HEAD_COUNT);
        for (i, head) in self.heads.iter().enumerate() {
            let raw = head.apply_tape(tape, h, params[idx], params[idx + 1]);
            idx += 2;
            out.push(if i < 2 { tape.tanh(raw) } else { raw });
        }
        out.try_into().unwrap()
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = Vec::new();
        for conv in self.trunk.iter().chain(self.heads.iter()) {
            ps.push(conv.weights.clone());
            ps.push(conv.bias.clone());
        }
        ps
    }

    pub fn set_params(&mut self, ps: &[Tensor]) {
        let mut idx = 0;
        for conv in self.trunk.iter_mut().chain(self.heads.iter_mut()) {
            conv.weights = ps[idx].clone();
            conv.bias = ps[idx + 1].clone();
            idx += 2;
        }
        assert_eq!(idx, ps.len());
    }

    pub fn num_params(&self) -> usize {
        2 * (self.trunk.len() + self.heads.len())
    }
}

/// f(u) = γ·s2(u)⊙tanh(u⊙s1(u) + t1(u)) + t2(u), together with the analytic
/// diagonal ∂f_i/∂u_i = γ·s2_i·(1 − tanh²)·s1_i. The diagonal formula holds
/// because the head maps are strictly autoregressive and therefore constant
/// in u_i.
pub fn f_ar_forward(net: &MaskedArNet, gamma: f64, u: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = u.shape();
    let expect = net.signal_shape();
    if s.len() != 4 || s[1] != expect[0] || s[2] != expect[1] || s[3] != expect[2] {
        return Err(Error::ShapeMismatch(format!(
            "f_ar input {:?} does not match configured shape {:?}",
            s, expect
        )));
    }
    let [s1, s2, t1, t2] = net.heads_pure(u);
    let pre = u.mul(&s1).add(&t1);
    let th = pre.map(f64::tanh);
    let f = s2.mul(&th).scale(gamma).add(&t2);
    let diag = s2
        .mul(&s1)
        .mul(&th.map(|t| 1.0 - t * t))
        .scale(gamma);
    Ok((f, diag))
}

fn f_ar_tape(
    net: &MaskedArNet,
    gamma: f64,
    tape: &mut Tape,
    u: NodeId,
    params: &[NodeId],
) -> (NodeId, NodeId) {
    let [s1, s2, t1, t2] = net.heads_tape(tape, u, params);
    let us1 = tape.mul(u, s1);
    let pre = tape.add(us1, t1);
    let th = tape.tanh(pre);
    let s2th = tape.mul(s2, th);
    let scaled = tape.mul_scalar(s2th, gamma);
    let f = tape.add(scaled, t2);
    // 1 - tanh²
    let th2 = tape.mul(th, th);
    let neg = tape.mul_scalar(th2, -1.0);
    let sech2 = tape.add_scalar(neg, 1.0);
    let s12 = tape.mul(s1, s2);
    let prod = tape.mul(s12, sech2);
    let diag = tape.mul_scalar(prod, gamma);
    (f, diag)
}

/// Upper-triangular residual R̃·h(R·u + b) over the flattened signal; the
/// configuration that recovers the original Sylvester flow inside the
/// generalized transform.
#[derive(Clone, Debug)]
pub struct TriangularAr {
    pub r: Tensor,
    pub r_tilde: Tensor,
    pub bias: Tensor,
}

impl TriangularAr {
    pub fn new(r: Tensor, r_tilde: Tensor, bias: Tensor) -> Result<TriangularAr> {
        let d = bias.numel();
        r.check_shape(&[d, d], "triangular R")?;
        r_tilde.check_shape(&[d, d], "triangular R~")?;
        for i in 0..d {
            for j in 0..i {
                if r.data()[i * d + j] != 0.0 || r_tilde.data()[i * d + j] != 0.0 {
                    return Err(Error::Config(format!(
                        "triangular factors must be upper triangular; nonzero at ({i},{j})"
                    )));
                }
            }
            // invertibility of z = x + W⁻¹f(Wx) needs diag(J_f) > -1
            let prod = r.data()[i * d + i] * r_tilde.data()[i * d + i];
            if prod <= -1.0 {
                return Err(Error::Config(format!(
                    "diagonal product {prod} at {i} violates the > -1 bound for ‖h'‖∞ = 1"
                )));
            }
        }
        Ok(TriangularAr { r, r_tilde, bias })
    }

    fn forward(&self, u: &Tensor) -> (Tensor, Tensor) {
        // u: [b, d_flat...] flattened per sample
        let d = self.bias.numel();
        let b = u.shape()[0];
        let flat = u.reshaped(&[b, d]);
        let mut f = Tensor::zeros(&[b, d]);
        let mut diag = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            let urow = &flat.data()[bi * d..(bi + 1) * d];
            let mut pre = vec![0.0; d];
            for i in 0..d {
                let mut acc = self.bias.data()[i];
                for j in i..d {
                    acc += self.r.data()[i * d + j] * urow[j];
                }
                pre[i] = acc;
            }
            let h: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
            for i in 0..d {
                let mut acc = 0.0;
                for j in i..d {
                    acc += self.r_tilde.data()[i * d + j] * h[j];
                }
                f.data_mut()[bi * d + i] = acc;
                let hp = 1.0 - h[i] * h[i];
                diag.data_mut()[bi * d + i] =
                    self.r_tilde.data()[i * d + i] * hp * self.r.data()[i * d + i];
            }
        }
        (f.reshaped(u.shape()), diag.reshaped(u.shape()))
    }
}

/// The autoregressive residual of a Sylvester layer.
#[derive(Clone, Debug)]
pub enum ArFunction {
    MaskedNet(MaskedArNet),
    Triangular(TriangularAr),
}

impl ArFunction {
    pub fn forward(&self, gamma: f64, u: &Tensor) -> Result<(Tensor, Tensor)> {
        match self {
            ArFunction::MaskedNet(net) => f_ar_forward(net, gamma, u),
            ArFunction::Triangular(tri) => Ok(tri.forward(u)),
        }
    }
}

/// Convolution-exponential half of the Sylvester basis, with its spectral
/// certificate.
#[derive(Clone, Debug)]
pub struct ExpKernel {
    pub weights: Tensor,
    pub padding: Padding,
    norm_cap: f64,
    power_vec: Tensor,
    factor: f64,
}

impl ExpKernel {
    pub fn init(channels: usize, shape: &[usize; 3], rng: &mut Rng) -> ExpKernel {
        // near-zero init keeps the initial exponential an identity map
        let weights = Tensor::randn(rng, &[channels, channels, 3, 3], 1e-4);
        let mut v = Tensor::randn(rng, &[shape[0], shape[1], shape[2]], 1.0);
        let n = v.l2_norm();
        if n > 0.0 {
            v = v.scale(1.0 / n);
        }
        ExpKernel {
            weights,
            padding: Padding::Zero,
            norm_cap: 0.9,
            power_vec: v,
            factor: 1.0,
        }
    }

    pub fn with_weights(weights: Tensor, padding: Padding, shape: &[usize; 3]) -> ExpKernel {
        let mut rng = Rng::seeded(0xeb_2077);
        let mut v = Tensor::randn(&mut rng, &[shape[0], shape[1], shape[2]], 1.0);
        let n = v.l2_norm();
        v = v.scale(1.0 / n);
        ExpKernel {
            weights,
            padding,
            norm_cap: 0.9,
            power_vec: v,
            factor: 1.0,
        }
    }

    pub fn refresh_certificate(&mut self, iters: usize) -> f64 {
        let shape = self.power_vec.shape().to_vec();
        let mut sigma = 0.0;
        for _ in 0..iters {
            let lifted = self.power_vec.reshaped(&[1, shape[0], shape[1], shape[2]]);
            let mv = convops::conv2d_batch(&lifted, &self.weights, self.padding);
            sigma = mv.l2_norm();
            if sigma < 1e-12 {
                self.factor = 1.0;
                return 0.0;
            }
            let back = convops::conv2d_transpose_batch(&mv, &self.weights, self.padding);
            let n = back.l2_norm();
            if n < 1e-300 {
                self.factor = 1.0;
                return 0.0;
            }
            self.power_vec = back.reshaped(&shape).scale(1.0 / n);
        }
        self.factor = cap_factor(self.norm_cap, sigma);
        sigma
    }

    pub fn effective_weights(&self) -> Tensor {
        self.weights.scale(self.factor)
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn certified_norm(&self) -> f64 {
        self.norm_cap
    }
}

/// Fixed-point inversion parameters.
#[derive(Clone, Copy, Debug)]
pub struct FixedPointConfig {
    pub abs_tolerance: f64,
    pub max_iters: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            abs_tolerance: 1e-4,
            max_iters: 50,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FixedPointReport {
    pub iters_used: usize,
    pub converged: bool,
    pub residual: f64,
}

/// Generalized Sylvester layer: basis W = exp(M)·Q (the exponential part is
/// optional; with it absent the basis is the orthogonal map alone).
#[derive(Clone, Debug)]
pub struct SylvesterLayer {
    pub kernel: Option<ExpKernel>,
    pub hh_vectors: Vec<Tensor>,
    pub ar: ArFunction,
    pub gamma: f64,
    pub exp_terms: usize,
}

impl SylvesterLayer {
    /// Standard convolutional configuration at the given signal shape.
    /// A single-channel map has no useful orthogonal mixing, so c = 1
    /// drops the reflections (they would be dead ±1 parameters).
    pub fn init_conv(
        shape: &[usize; 3],
        hidden: usize,
        depth: usize,
        reflections: usize,
        rng: &mut Rng,
    ) -> SylvesterLayer {
        let c = shape[0];
        let reflections = if c == 1 { 0 } else { reflections };
        let hh_vectors = (0..reflections)
            .map(|_| {
                // rejection keeps reflections well-conditioned
                loop {
                    let v = Tensor::randn(rng, &[c], 1.0);
                    if v.l2_norm() > 1e-3 {
                        return v;
                    }
                }
            })
            .collect();
        SylvesterLayer {
            kernel: Some(ExpKernel::init(c, shape, rng)),
            hh_vectors,
            ar: ArFunction::MaskedNet(MaskedArNet::init(
                c, hidden, depth, shape[1], shape[2], rng,
            )),
            gamma: 0.5,
            exp_terms: 6,
        }
    }

    pub fn refresh_certificates(&mut self, iters: usize) {
        if let Some(k) = self.kernel.as_mut() {
            k.refresh_certificate(iters);
        }
        if let ArFunction::MaskedNet(net) = &mut self.ar {
            net.refresh_certificates(iters);
        }
    }

    fn hh_vecs(&self) -> Vec<Vec<f64>> {
        self.hh_vectors.iter().map(|v| v.data().to_vec()).collect()
    }

    /// W x = exp(M)·(Q x); plain Q x when no kernel is configured.
    pub fn basis_apply(&self, x: &Tensor) -> Tensor {
        let qx = hh_batch(x, &self.hh_vecs(), false);
        match &self.kernel {
            Some(k) => expv_batch(&qx, &k.effective_weights(), k.padding, self.exp_terms, 1.0),
            None => qx,
        }
    }

    /// W⁻¹ y = Qᵀ·(exp(−M) y).
    pub fn basis_inverse_apply(&self, y: &Tensor) -> Tensor {
        let inner = match &self.kernel {
            Some(k) => expv_batch(y, &k.effective_weights(), k.padding, self.exp_terms, -1.0),
            None => y.clone(),
        };
        hh_batch(&inner, &self.hh_vecs(), true)
    }

    /// Forward map with its exact log-determinant Σ log(1 + ∂f_i/∂u_i).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let u = self.basis_apply(x);
        let (f, diag) = self.ar.forward(self.gamma, &u)?;
        let z = x.add(&self.basis_inverse_apply(&f));
        let b = x.shape()[0];
        let per = diag.numel() / b;
        let logdet = (0..b)
            .map(|bi| {
                diag.data()[bi * per..(bi + 1) * per]
                    .iter()
                    .map(|&d| (1.0 + d).ln())
                    .sum()
            })
            .collect();
        Ok((z, logdet))
    }

    /// Fixed-point inverse: v = W z, u ← v − f(u) from u = v, then
    /// x = W⁻¹ u. Non-convergence returns the best iterate with the report
    /// flagging the violated certificate.
    pub fn inverse(&self, z: &Tensor, cfg: &FixedPointConfig) -> Result<(Tensor, FixedPointReport)> {
        let v = self.basis_apply(z);
        let mut u = v.clone();
        let mut report = FixedPointReport {
            iters_used: cfg.max_iters,
            converged: false,
            residual: f64::INFINITY,
        };
        for it in 1..=cfg.max_iters {
            let (f, _) = self.ar.forward(self.gamma, &u)?;
            let next = v.sub(&f);
            let delta = next.max_abs_diff(&u);
            u = next;
            if delta <= cfg.abs_tolerance {
                report = FixedPointReport {
                    iters_used: it,
                    converged: true,
                    residual: delta,
                };
                break;
            }
            report.residual = delta;
        }
        Ok((self.basis_inverse_apply(&u), report))
    }

    /// Tape forward for training; parameter order matches [`Self::params`].
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x: NodeId,
        params: &[NodeId],
    ) -> Result<(NodeId, NodeId)> {
        let ArFunction::MaskedNet(net) = &self.ar else {
            return Err(Error::Config(
                "triangular Sylvester configuration has no training path".into(),
            ));
        };
        let mut idx = 0;
        let kernel_node = self.kernel.as_ref().map(|k| {
            let n = params[idx];
            idx += 1;
            let scaled = tape.mul_scalar(n, k.factor);
            (scaled, k.padding)
        });
        let hh_nodes: Vec<NodeId> = (0..self.hh_vectors.len())
            .map(|_| {
                let n = params[idx];
                idx += 1;
                n
            })
            .collect();
        let net_params = &params[idx..idx + net.num_params()];

        // u = exp(M)·(Q x)
        let qx = tape.householder(x, &hh_nodes, false);
        let u = match kernel_node {
            Some((k, padding)) => expv_tape(tape, qx, k, padding, self.exp_terms, false),
            None => qx,
        };
        let (f, diag) = f_ar_tape(net, self.gamma, tape, u, net_params);
        // z = x + Qᵀ·(exp(−M)·f)
        let inner = match kernel_node {
            Some((k, padding)) => expv_tape(tape, f, k, padding, self.exp_terms, true),
            None => f,
        };
        let residual = tape.householder(inner, &hh_nodes, true);
        let z = tape.add(x, residual);
        // per-sample Σ log(1 + diag)
        let shifted = tape.add_scalar(diag, 1.0);
        let ld = tape.ln(shifted);
        let logdet = tape.sum_per_sample(ld);
        Ok((z, logdet))
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = Vec::new();
        if let Some(k) = &self.kernel {
            ps.push(k.weights.clone());
        }
        ps.extend(self.hh_vectors.iter().cloned());
        if let ArFunction::MaskedNet(net) = &self.ar {
            ps.extend(net.params());
        }
        ps
    }

    pub fn set_params(&mut self, ps: &[Tensor]) {
        let mut idx = 0;
        if let Some(k) = &mut self.kernel {
            k.weights = ps[idx].clone();
            idx += 1;
        }
        for v in &mut self.hh_vectors {
            *v = ps[idx].clone();
            idx += 1;
        }
        if let ArFunction::MaskedNet(net) = &mut self.ar {
            net.set_params(&ps[idx..]);
            idx += net.num_params();
        }
        assert_eq!(idx, ps.len());
    }

    /// (hidden, depth) of the masked conditioner, when present.
    pub fn masked_net_dims(&self) -> Option<(usize, usize)> {
        match &self.ar {
            ArFunction::MaskedNet(net) => Some((net.hidden, net.trunk.len())),
            ArFunction::Triangular(_) => None,
        }
    }

    pub fn num_params(&self) -> usize {
        let net = match &self.ar {
            ArFunction::MaskedNet(net) => net.num_params(),
            ArFunction::Triangular(_) => 0,
        };
        self.kernel.as_ref().map(|_| 1).unwrap_or(0) + self.hh_vectors.len() + net
    }

    /// Worst-case leftover of the truncated series at the certified norm;
    /// bounds the inexactness the fixed-point inverse has to absorb.
    pub fn series_tail_bound(&self) -> f64 {
        match &self.kernel {
            Some(k) => (self.exp_terms + 1..self.exp_terms + 40)
                .map(|i| term_bound(k.certified_norm(), i))
                .sum(),
            None => 0.0,
        }
    }
}

/// Batched Householder product (shared with the tape op semantics).
pub(crate) fn hh_batch(x: &Tensor, vecs: &[Vec<f64>], transposed: bool) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4);
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = x.clone();
    let data = out.data_mut();
    let order: Vec<&Vec<f64>> = if transposed {
        vecs.iter().collect()
    } else {
        vecs.iter().rev().collect()
    };
    let mut buf = vec![0.0; c];
    for bi in 0..b {
        for p in 0..h * w {
            for ci in 0..c {
                buf[ci] = data[(bi * c + ci) * h * w + p];
            }
            for v in &order {
                let norm_sq: f64 = v.iter().map(|a| a * a).sum();
                let dot: f64 = v.iter().zip(buf.iter()).map(|(a, b)| a * b).sum();
                let f = 2.0 * dot / norm_sq;
                for (xi, vi) in buf.iter_mut().zip(v.iter()) {
                    *xi -= f * vi;
                }
            }
            for ci in 0..c {
                data[(bi * c + ci) * h * w + p] = buf[ci];
            }
        }
    }
    out
}

/// Truncated exponential series of the (possibly negated) convolution,
/// batched.
pub(crate) fn expv_batch(x: &Tensor, kernel: &Tensor, padding: Padding, terms: usize, sign: f64) -> Tensor {
    let k = if sign < 0.0 {
        kernel.scale(-1.0)
    } else {
        kernel.clone()
    };
    let mut z = x.clone();
    let mut pi = x.clone();
    for i in 1..=terms {
        pi = convops::conv2d_batch(&pi, &k, padding).scale(1.0 / i as f64);
        z = z.add(&pi);
    }
    z
}

pub(crate) fn expv_tape(
    tape: &mut Tape,
    x: NodeId,
    kernel: NodeId,
    padding: Padding,
    terms: usize,
    negate: bool,
) -> NodeId {
    let k = if negate {
        tape.mul_scalar(kernel, -1.0)
    } else {
        kernel
    };
    let mut z = x;
    let mut pi = x;
    for i in 1..=terms {
        let applied = tape.conv2d(pi, k, padding, None);
        pi = tape.mul_scalar(applied, 1.0 / i as f64);
        z = tape.add(z, pi);
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::logdet_via_lu;
    use crate::dense::DenseMatrix;

    fn randomized_net(shape: &[usize; 3], rng: &mut Rng) -> MaskedArNet {
        let mut net = MaskedArNet::init(shape[0], 12, 2, shape[1], shape[2], rng);
        // give the heads real weights, then re-certify
        for head in &mut net.heads {
            head.weights = Tensor::randn(rng, head.weights.shape(), 0.4);
            head.bias = Tensor::randn(rng, head.bias.shape(), 0.2);
        }
        for conv in &mut net.trunk {
            conv.weights = Tensor::randn(rng, conv.weights.shape(), 0.4);
            conv.bias = Tensor::randn(rng, conv.bias.shape(), 0.2);
        }
        net.refresh_certificates(200);
        net
    }

    fn randomized_layer(shape: &[usize; 3], rng: &mut Rng) -> SylvesterLayer {
        let mut layer = SylvesterLayer::init_conv(shape, 12, 2, 2.min(shape[0]), rng);
        if let Some(k) = &mut layer.kernel {
            k.weights = Tensor::randn(rng, k.weights.shape(), 0.3);
        }
        layer.ar = ArFunction::MaskedNet(randomized_net(shape, rng));
        layer.exp_terms = 20;
        layer.refresh_certificates(300);
        layer
    }

    fn ar_index(c: usize, ci: usize, y: usize, x: usize, w: usize) -> usize {
        (y * w + x) * c + ci
    }

    #[test]
    fn mask_strictness_by_jacobian_probing() {
        let mut rng = Rng::seeded(81);
        let shape = [2usize, 3, 3];
        let net = randomized_net(&shape, &mut rng);
        let d = 2 * 3 * 3;
        let eps = 1e-6;
        // probe each head's full Jacobian; raster/channel-major order must
        // be strictly lower triangular
        let u0 = Tensor::randn(&mut rng, &[1, 2, 3, 3], 1.0);
        for h in 0..HEAD_COUNT {
            for jc in 0..2 {
                for jy in 0..3 {
                    for jx in 0..3 {
                        let mut up = u0.clone();
                        let mut dn = u0.clone();
                        let flat = (jc * 3 + jy) * 3 + jx;
                        up.data_mut()[flat] += eps;
                        dn.data_mut()[flat] -= eps;
                        let hu = net.heads_pure(&up)[h].clone();
                        let hd = net.heads_pure(&dn)[h].clone();
                        let j_in = ar_index(2, jc, jy, jx, 3);
                        for ic in 0..2 {
                            for iy in 0..3 {
                                for ix in 0..3 {
                                    let i_out = ar_index(2, ic, iy, ix, 3);
                                    if i_out <= j_in {
                                        let fd = (hu.data()[(ic * 3 + iy) * 3 + ix]
                                            - hd.data()[(ic * 3 + iy) * 3 + ix])
                                            / (2.0 * eps);
                                        assert!(
                                            fd.abs() < 1e-10,
                                            "head {h}: output {i_out} depends on input {j_in}: {fd:.3e}"
                                        );
                                    }
                                }
                            }
                        }
                        let _ = d;
                    }
                }
            }
        }
    }

    #[test]
    fn zero_initialized_net_gives_identity_layer() {
        let mut rng = Rng::seeded(82);
        let shape = [2usize, 4, 4];
        let layer = SylvesterLayer::init_conv(&shape, 8, 2, 2, &mut rng);
        let x = Tensor::randn(&mut rng, &[3, 2, 4, 4], 1.0);
        let (f, diag) = match &layer.ar {
            ArFunction::MaskedNet(net) => f_ar_forward(net, layer.gamma, &x).unwrap(),
            _ => unreachable!(),
        };
        assert_eq!(f, Tensor::zeros(x.shape()));
        assert_eq!(diag, Tensor::zeros(x.shape()));
        let (z, logdet) = layer.forward(&x).unwrap();
        // exp kernel is ~1e-4 so the basis round trip is not exactly the
        // identity, but the layer output is x + W⁻¹·0 = x exactly
        assert_eq!(z, x);
        assert!(logdet.iter().all(|&l| l == 0.0));
        let (back, report) = layer.inverse(&z, &FixedPointConfig::default()).unwrap();
        assert!(report.converged);
        assert_eq!(report.iters_used, 1);
        assert!(back.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn diag_jac_matches_finite_differences() {
        let mut rng = Rng::seeded(83);
        let shape = [1usize, 4, 4];
        let net = randomized_net(&shape, &mut rng);
        let u = Tensor::randn(&mut rng, &[1, 1, 4, 4], 1.0);
        let (_, diag) = f_ar_forward(&net, 0.5, &u).unwrap();
        let eps = 1e-5;
        for i in 0..16 {
            let mut up = u.clone();
            up.data_mut()[i] += eps;
            let mut dn = u.clone();
            dn.data_mut()[i] -= eps;
            let (fu, _) = f_ar_forward(&net, 0.5, &up).unwrap();
            let (fd, _) = f_ar_forward(&net, 0.5, &dn).unwrap();
            let fdg = (fu.data()[i] - fd.data()[i]) / (2.0 * eps);
            assert!(
                (diag.data()[i] - fdg).abs() < 1e-5,
                "position {i}: analytic {} vs fd {fdg}",
                diag.data()[i]
            );
        }
    }

    #[test]
    fn diag_bound_sweep() {
        let mut rng = Rng::seeded(84);
        let shape = [2usize, 3, 3];
        for _ in 0..20 {
            let net = randomized_net(&shape, &mut rng);
            for _ in 0..50 {
                let u = Tensor::randn(&mut rng, &[1, 2, 3, 3], 2.0);
                let (_, diag) = f_ar_forward(&net, 0.5, &u).unwrap();
                assert!(diag.linf_norm() <= 0.5, "diag {}", diag.linf_norm());
            }
        }
    }

    fn numerical_logdet(layer: &SylvesterLayer, x: &Tensor) -> f64 {
        let d = x.numel();
        let eps = 1e-5;
        let mut jac = DenseMatrix::zeros(d, d);
        for j in 0..d {
            let mut up = x.clone();
            up.data_mut()[j] += eps;
            let mut dn = x.clone();
            dn.data_mut()[j] -= eps;
            let (zu, _) = layer.forward(&up).unwrap();
            let (zd, _) = layer.forward(&dn).unwrap();
            for i in 0..d {
                jac.set(i, j, (zu.data()[i] - zd.data()[i]) / (2.0 * eps));
            }
        }
        logdet_via_lu(&jac).unwrap().0
    }

    #[test]
    fn logdet_matches_dense_jacobian() {
        let mut rng = Rng::seeded(85);
        let shape = [1usize, 3, 3];
        let layer = randomized_layer(&shape, &mut rng);
        for _ in 0..3 {
            let x = Tensor::randn(&mut rng, &[1, 1, 3, 3], 1.0);
            let (_, logdet) = layer.forward(&x).unwrap();
            let numeric = numerical_logdet(&layer, &x);
            assert!(
                (logdet[0] - numeric).abs() < 1e-4,
                "analytic {} vs numeric {numeric}",
                logdet[0]
            );
        }
    }

    #[test]
    fn original_sylvester_special_case() {
        // basis = orthogonal Q only, f = R̃·tanh(R·u + b) with upper
        // triangular factors
        let mut rng = Rng::seeded(86);
        let d = 9;
        let mut r = Tensor::zeros(&[d, d]);
        let mut rt = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in i..d {
                r.data_mut()[i * d + j] = rng.normal() * 0.3;
                rt.data_mut()[i * d + j] = rng.normal() * 0.3;
            }
        }
        let bias = Tensor::randn(&mut rng, &[d], 0.3);
        let tri = TriangularAr::new(r, rt, bias).unwrap();
        let layer = SylvesterLayer {
            kernel: None,
            hh_vectors: vec![
                Tensor::randn(&mut rng, &[1], 1.0),
            ],
            ar: ArFunction::Triangular(tri),
            gamma: 0.5,
            exp_terms: 1,
        };
        // single channel: Householder on c=1 is ±1, still orthogonal
        for _ in 0..3 {
            let x = Tensor::randn(&mut rng, &[1, 1, 3, 3], 1.0);
            let (_, logdet) = layer.forward(&x).unwrap();
            let numeric = numerical_logdet(&layer, &x);
            assert!(
                (logdet[0] - numeric).abs() < 1e-4,
                "analytic {} vs numeric {numeric}",
                logdet[0]
            );
        }
        // and the fixed-point inverse recovers x
        let x = Tensor::randn(&mut rng, &[2, 1, 3, 3], 1.0);
        let (z, _) = layer.forward(&x).unwrap();
        let (back, report) = layer
            .inverse(
                &z,
                &FixedPointConfig {
                    abs_tolerance: 1e-10,
                    max_iters: 200,
                },
            )
            .unwrap();
        assert!(report.converged);
        assert!(back.max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn forward_inverse_round_trip() {
        let mut rng = Rng::seeded(87);
        let shape = [2usize, 8, 8];
        for trial in 0..5 {
            let layer = randomized_layer(&shape, &mut rng);
            let x = Tensor::randn(&mut rng, &[2, 2, 8, 8], 1.0);
            let (z, _) = layer.forward(&x).unwrap();
            let (back, report) = layer.inverse(&z, &FixedPointConfig::default()).unwrap();
            assert!(report.converged, "trial {trial} did not converge");
            assert!(report.iters_used <= 50);
            let err = back.max_abs_diff(&x);
            assert!(err < 1e-3, "trial {trial}: round trip error {err:.3e}");
        }
    }

    #[test]
    fn scalar_instance_contracts_at_gamma_rate() {
        // c = h = w = 1: f(u) = γ·s̄2·tanh(u·s̄1 + t̄1) + t̄2 with constant
        // heads; the fixed-point error ratio is bounded by γ.
        let mut rng = Rng::seeded(88);
        let shape = [1usize, 1, 1];
        let mut net = MaskedArNet::init(1, 4, 2, 1, 1, &mut rng);
        // heads have no visible inputs at 1 dim; bias terms drive them
        net.heads[0].bias = Tensor::from_vec(&[1], vec![3.0]); // s1 ≈ tanh(3)
        net.heads[1].bias = Tensor::from_vec(&[1], vec![-2.0]); // s2 ≈ -tanh(2)
        net.heads[2].bias = Tensor::from_vec(&[1], vec![0.4]);
        net.heads[3].bias = Tensor::from_vec(&[1], vec![-0.7]);
        net.refresh_certificates(100);
        let layer = SylvesterLayer {
            kernel: None,
            hh_vectors: vec![],
            ar: ArFunction::MaskedNet(net),
            gamma: 0.5,
            exp_terms: 1,
        };
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![1.3]);
        let (z, _) = layer.forward(&x).unwrap();
        // iterate manually and watch the error ratio against the limit
        let v = layer.basis_apply(&z);
        let mut u = v.clone();
        let mut errs = Vec::new();
        let u_star = {
            let mut uu = v.clone();
            for _ in 0..200 {
                let (f, _) = layer.ar.forward(layer.gamma, &uu).unwrap();
                uu = v.sub(&f);
            }
            uu
        };
        for _ in 0..30 {
            errs.push(u.max_abs_diff(&u_star));
            let (f, _) = layer.ar.forward(layer.gamma, &u).unwrap();
            u = v.sub(&f);
        }
        for w in errs.windows(2) {
            if w[0] > 1e-13 {
                let ratio = w[1] / w[0];
                assert!(ratio <= 0.5 + 1e-9, "ratio {ratio}");
            }
        }
    }

    #[test]
    fn tape_forward_matches_pure_forward() {
        let mut rng = Rng::seeded(89);
        let shape = [2usize, 4, 4];
        let layer = randomized_layer(&shape, &mut rng);
        let x = Tensor::randn(&mut rng, &[2, 2, 4, 4], 1.0);
        let (z_pure, ld_pure) = layer.forward(&x).unwrap();
        let mut tape = Tape::new();
        let pids: Vec<NodeId> = layer.params().iter().map(|p| tape.param(p.clone())).collect();
        let xn = tape.constant(x.clone());
        let (zn, ldn) = layer.forward_tape(&mut tape, xn, &pids).unwrap();
        assert!(tape.value(zn).max_abs_diff(&z_pure) < 1e-12);
        for (bi, &l) in ld_pure.iter().enumerate() {
            assert!((tape.value(ldn).data()[bi] - l).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_gradients_pass_gradcheck() {
        let mut rng = Rng::seeded(90);
        let shape = [1usize, 3, 3];
        let layer = randomized_layer(&shape, &mut rng);
        let x = Tensor::randn(&mut rng, &[1, 1, 3, 3], 1.0);
        let params = layer.params();
        let err = crate::autodiff::gradcheck(
            |tape, ids| {
                let xn = tape.constant(x.clone());
                let (z, ld) = layer.forward_tape(tape, xn, ids)?;
                let sq = tape.mul(z, z);
                let szz = tape.sum_all(sq);
                let sld = tape.sum_all(ld);
                Ok(tape.add(szz, sld))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "gradcheck err {err:.3e}");
    }
}
