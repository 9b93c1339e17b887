//! Tape-based reverse-mode differentiation over the operation set used by
//! the flows: tensor arithmetic, convolution (optionally masked), graph
//! convolution, Householder maps, the unrolled exponential series, and the
//! handful of reductions the likelihood needs.
//!
//! One tape per evaluation. Leaves are parameters (tracked) or constants
//! (untracked); `backward` walks the node list once in reverse, so the
//! gradient of the truncated exponential series is the gradient of exactly
//! what the forward pass computed.

use crate::convops::{self, Padding};
use crate::gemm::Act;
use crate::dense::{invert, logdet_via_lu, DenseMatrix};
use crate::error::{Error, Result};
use crate::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    LeakyRelu(NodeId, f64),
    SumAll(NodeId),
    SumPerSample(NodeId),
    /// x + s with s a scalar node broadcast over x.
    AddScalarNode(NodeId, NodeId),
    MulConst(NodeId, Tensor),
    /// Vector of length shape[axis] broadcast to `shape`.
    BroadcastAxis {
        v: NodeId,
        axis: usize,
    },
    /// x[..., in] · w[in, out]
    Linear {
        x: NodeId,
        w: NodeId,
    },
    /// act(x[..., in] · w[in, out] + bias[out])
    LinearBias {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        act: Act,
    },
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        padding: Padding,
        mask: Option<Tensor>,
    },
    Gcl {
        x: NodeId,
        theta0: NodeId,
        theta1: NodeId,
        ahat: Tensor,
    },
    Householder {
        x: NodeId,
        vectors: Vec<NodeId>,
        transposed: bool,
    },
    /// [b,n,f] -> [b,n,n-1,2f], diagonal pairs excluded
    PairConcatOffdiag(NodeId),
    /// act(x·w_top |_i + x·w_bot |_j + bias) over off-diagonal pairs:
    /// the first edge layer, with the pair tensor never materialized.
    PairEdgeAffine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        act: Act,
    },
    SumAxis {
        x: NodeId,
        axis: usize,
    },
    SliceLast {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatLast(NodeId, NodeId),
    ConvExpLogdet {
        kernel: NodeId,
        hw: f64,
    },
    GclExpLogdet {
        theta0: NodeId,
        n: f64,
    },
    LogAbsDet(NodeId),
    Reshape(NodeId),
    Transpose2d(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), value, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), value, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).mul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), value, rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(Op::AddScalar(x), value, rg)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(Op::MulScalar(x, c), value, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(Op::Tanh(x), value, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), value, rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(Op::Exp(x), value, rg)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        self.push(Op::Ln(x), value, rg)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(Op::LeakyRelu(x, slope), value, rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::SumAll(x), value, rg)
    }

    /// [b, ...] -> [b], summing everything but the leading axis.
    pub fn sum_per_sample(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let b = xv.shape()[0];
        let per = xv.numel() / b.max(1);
        let mut out = Tensor::zeros(&[b]);
        for bi in 0..b {
            out.data_mut()[bi] = xv.data()[bi * per..(bi + 1) * per].iter().sum();
        }
        let rg = self.rg(x);
        self.push(Op::SumPerSample(x), out, rg)
    }

    pub fn add_scalar_node(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).numel(), 1, "broadcast addend must be scalar");
        let sv = self.value(s).data()[0];
        let value = self.value(x).map(|v| v + sv);
        let rg = self.rg(x) || self.rg(s);
        self.push(Op::AddScalarNode(x, s), value, rg)
    }

    pub fn mul_const(&mut self, x: NodeId, t: Tensor) -> NodeId {
        let value = self.value(x).mul(&t);
        let rg = self.rg(x);
        self.push(Op::MulConst(x, t), value, rg)
    }

    /// Broadcasts a vector along `axis` of `shape` (all other axes expanded).
    pub fn broadcast_axis(&mut self, v: NodeId, shape: &[usize], axis: usize) -> NodeId {
        let vv = self.value(v);
        assert_eq!(vv.numel(), shape[axis], "broadcast axis length mismatch");
        let mut out = Tensor::zeros(shape);
        let (outer, len, inner) = split_axis(shape, axis);
        let od = out.data_mut();
        for o in 0..outer {
            for k in 0..len {
                let val = vv.data()[k];
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    od[base + i] = val;
                }
            }
        }
        let rg = self.rg(v);
        self.push(Op::BroadcastAxis { v, axis }, out, rg)
    }

    /// x[..., in] · w[in, out], applied row-wise over all leading axes.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let ws = wv.shape();
        assert_eq!(ws.len(), 2, "linear weight must be [in, out]");
        let (cin, cout) = (ws[0], ws[1]);
        let xs = xv.shape();
        assert_eq!(*xs.last().unwrap(), cin, "linear input width mismatch");
        let rows = xv.numel() / cin;
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = cout;
        let data = gemm::matmul(xv.data(), wv.data(), rows, cin, cout);
        let value = Tensor::from_vec(&shape, data);
        let rg = self.rg(x) || self.rg(w);
        self.push(Op::Linear { x, w }, value, rg)
    }

    /// Fused x[..., in] · w[in, out] + bias[out].
    pub fn linear_bias(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.linear_bias_act(x, w, b, Act::Linear)
    }

    /// Fused linear + bias + elementwise activation; one tape node, one
    /// allocation.
    pub fn linear_bias_act(&mut self, x: NodeId, w: NodeId, b: NodeId, act: Act) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let ws = wv.shape();
        assert_eq!(ws.len(), 2, "linear weight must be [in, out]");
        let (cin, cout) = (ws[0], ws[1]);
        let xs = xv.shape();
        assert_eq!(*xs.last().unwrap(), cin, "linear input width mismatch");
        assert_eq!(self.value(b).numel(), cout, "bias width mismatch");
        let rows = xv.numel() / cin;
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = cout;
        let data = gemm::matmul_bias_act(
            xv.data(),
            wv.data(),
            Some(self.value(b).data()),
            act,
            rows,
            cin,
            cout,
        );
        let value = Tensor::from_vec(&shape, data);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::LinearBias { x, w, b, act }, value, rg)
    }

    /// Convolution with an optional fixed binary mask on the kernel.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        padding: Padding,
        mask: Option<Tensor>,
    ) -> NodeId {
        let k_eff = match &mask {
            Some(m) => self.value(kernel).mul(m),
            None => self.value(kernel).clone(),
        };
        let value = convops::conv2d_batch(self.value(x), &k_eff, padding);
        let rg = self.rg(x) || self.rg(kernel);
        self.push(
            Op::Conv2d {
                x,
                kernel,
                padding,
                mask,
            },
            value,
            rg,
        )
    }

    pub fn gcl(&mut self, x: NodeId, theta0: NodeId, theta1: NodeId, ahat: Tensor) -> NodeId {
        let value = convops::gcl_batch(self.value(x), self.value(theta0), self.value(theta1), &ahat);
        let rg = self.rg(x) || self.rg(theta0) || self.rg(theta1);
        self.push(
            Op::Gcl {
                x,
                theta0,
                theta1,
                ahat,
            },
            value,
            rg,
        )
    }

    /// Householder product over the channel axis of [b, c, h, w].
    /// `transposed` applies Qᵀ instead of Q.
    pub fn householder(&mut self, x: NodeId, vectors: &[NodeId], transposed: bool) -> NodeId {
        let vecs: Vec<Vec<f64>> = vectors
            .iter()
            .map(|&v| self.value(v).data().to_vec())
            .collect();
        let value = householder_batch(self.value(x), &vecs, transposed);
        let rg = self.rg(x) || vectors.iter().any(|&v| self.rg(v));
        self.push(
            Op::Householder {
                x,
                vectors: vectors.to_vec(),
                transposed,
            },
            value,
            rg,
        )
    }

    /// [b, n, f] -> [b, n, n-1, 2f]; slot (i, s) carries [x_i, x_j] for the
    /// s-th neighbour j ≠ i in index order.
    pub fn pair_concat_offdiag(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 3, "pair_concat expects [b, n, f]");
        let (b, n, f) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * n * (n - 1) * 2 * f);
        let xd = xv.data();
        for bi in 0..b {
            for i in 0..n {
                let xi = &xd[(bi * n + i) * f..(bi * n + i + 1) * f];
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let xj = &xd[(bi * n + j) * f..(bi * n + j + 1) * f];
                    out.extend_from_slice(xi);
                    out.extend_from_slice(xj);
                }
            }
        }
        let value = Tensor::from_vec(&[b, n, n - 1, 2 * f], out);
        let rg = self.rg(x);
        self.push(Op::PairConcatOffdiag(x), value, rg)
    }

    /// First edge layer fused over off-diagonal node pairs:
    /// out[b,i,s,:] = act(x[b,i]·w_top + x[b,j(s)]·w_bot + bias) for the
    /// weight split w = [w_top; w_bot] with w [2f, h]. Equivalent to
    /// `linear_bias_act(pair_concat_offdiag(x), w, b)` without building the
    /// pair tensor.
    pub fn pair_edge_affine(&mut self, x: NodeId, w: NodeId, b: NodeId, act: Act) -> NodeId {
        let value = pair_edge_affine_forward(self.value(x), self.value(w), self.value(b), act);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::PairEdgeAffine { x, w, b, act }, value, rg)
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut out = Tensor::zeros(&out_shape);
        let xd = xv.data();
        let od = out.data_mut();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    od[obase + i] += xd[base + i];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Op::SumAxis { x, axis }, out, rg)
    }

    /// Selects [start, start+len) of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let width = *shape.last().unwrap();
        assert!(start + len <= width, "slice_last out of range");
        let rows = xv.numel() / width;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let mut out = Tensor::zeros(&out_shape);
        for r in 0..rows {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&xv.data()[r * width + start..r * width + start + len]);
        }
        let rg = self.rg(x);
        self.push(Op::SliceLast { x, start, len }, out, rg)
    }

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let asp = av.shape();
        let bsp = bv.shape();
        assert_eq!(asp[..asp.len() - 1], bsp[..bsp.len() - 1]);
        let (wa, wb) = (*asp.last().unwrap(), *bsp.last().unwrap());
        let rows = av.numel() / wa;
        let mut shape = asp.to_vec();
        *shape.last_mut().unwrap() = wa + wb;
        let mut out = Tensor::zeros(&shape);
        for r in 0..rows {
            let base = r * (wa + wb);
            out.data_mut()[base..base + wa].copy_from_slice(&av.data()[r * wa..(r + 1) * wa]);
            out.data_mut()[base + wa..base + wa + wb]
                .copy_from_slice(&bv.data()[r * wb..(r + 1) * wb]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::ConcatLast(a, b), out, rg)
    }

    /// hw · Σ_c k[c, c, my, mx]: the log-determinant of a convolution
    /// exponential, linear in the kernel.
    pub fn conv_exp_logdet(&mut self, kernel: NodeId, hw: f64) -> NodeId {
        let kv = self.value(kernel);
        let s = kv.shape();
        let (c, kh, kw) = (s[0], s[2], s[3]);
        let center: f64 = (0..c)
            .map(|ci| kv.data()[((ci * c + ci) * kh + kh / 2) * kw + kw / 2])
            .sum();
        let value = Tensor::scalar(hw * center);
        let rg = self.rg(kernel);
        self.push(Op::ConvExpLogdet { kernel, hw }, value, rg)
    }

    /// n · tr(θ0): the log-determinant of a graph convolution exponential.
    pub fn gcl_exp_logdet(&mut self, theta0: NodeId, n: f64) -> NodeId {
        let tv = self.value(theta0);
        let f = tv.shape()[0];
        let tr: f64 = (0..f).map(|i| tv.data()[i * f + i]).sum();
        let value = Tensor::scalar(n * tr);
        let rg = self.rg(theta0);
        self.push(Op::GclExpLogdet { theta0, n }, value, rg)
    }

    /// log |det W| for a square weight matrix.
    pub fn log_abs_det(&mut self, w: NodeId) -> Result<NodeId> {
        let wv = self.value(w);
        let s = wv.shape();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], s[1]);
        let m = DenseMatrix::from_vec(s[0], s[1], wv.data().to_vec());
        let (ld, _) = logdet_via_lu(&m)?;
        let rg = self.rg(w);
        Ok(self.push(Op::LogAbsDet(w), Tensor::scalar(ld), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let value = self.value(x).reshaped(shape);
        let rg = self.rg(x);
        self.push(Op::Reshape(x), value, rg)
    }

    pub fn transpose2d(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 2, "transpose2d expects a matrix");
        let (m, n) = (s[0], s[1]);
        let value = Tensor::from_vec(&[n, m], gemm::transpose(xv.data(), m, n));
        let rg = self.rg(x);
        self.push(Op::Transpose2d(x), value, rg)
    }

    /// Reverse pass from a scalar loss; returns per-node adjoints.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0).reshaped(self.value(loss).shape()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.accumulate(idx, &g, &mut adj)?;
            // only leaf adjoints are read back; interior buffers are
            // released immediately to keep peak memory at one live layer
            if matches!(self.nodes[idx].op, Op::Leaf) {
                adj[idx] = Some(g);
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    fn seed(&self, adj: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.rg(id) {
            return;
        }
        match &mut adj[id.0] {
            Some(t) => {
                t.add_scaled_inplace(1.0, &delta);
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.seed(adj, *a, g.clone());
                self.seed(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.seed(adj, *a, g.clone());
                self.seed(adj, *b, g.neg());
            }
            Op::Mul(a, b) => {
                self.seed(adj, *a, g.mul(self.value(*b)));
                self.seed(adj, *b, g.mul(self.value(*a)));
            }
            Op::AddScalar(x) => self.seed(adj, *x, g.clone()),
            Op::MulScalar(x, c) => self.seed(adj, *x, g.scale(*c)),
            Op::Tanh(x) => {
                let y = &self.nodes[idx].value;
                self.seed(adj, *x, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)));
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                self.seed(adj, *x, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)));
            }
            Op::Exp(x) => {
                let y = &self.nodes[idx].value;
                self.seed(adj, *x, g.mul(y));
            }
            Op::Ln(x) => {
                let xv = self.value(*x);
                self.seed(adj, *x, g.zip_map(xv, |gi, xi| gi / xi));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let s = *slope;
                self.seed(
                    adj,
                    *x,
                    g.zip_map(xv, |gi, xi| if xi > 0.0 { gi } else { s * gi }),
                );
            }
            Op::SumAll(x) => {
                let gs = g.data()[0];
                self.seed(adj, *x, Tensor::filled(self.value(*x).shape(), gs));
            }
            Op::SumPerSample(x) => {
                let xs = self.value(*x).shape().to_vec();
                let b = xs[0];
                let per = self.value(*x).numel() / b.max(1);
                let mut d = Tensor::zeros(&xs);
                for bi in 0..b {
                    let gv = g.data()[bi];
                    for v in &mut d.data_mut()[bi * per..(bi + 1) * per] {
                        *v = gv;
                    }
                }
                self.seed(adj, *x, d);
            }
            Op::AddScalarNode(x, s) => {
                self.seed(adj, *x, g.clone());
                self.seed(adj, *s, Tensor::scalar(g.sum()).reshaped(self.value(*s).shape()));
            }
            Op::MulConst(x, t) => self.seed(adj, *x, g.mul(t)),
            Op::BroadcastAxis { v, axis } => {
                let shape = self.nodes[idx].value.shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut d = Tensor::zeros(self.value(*v).shape());
                let gd = g.data();
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        let mut acc = 0.0;
                        for i in 0..inner {
                            acc += gd[base + i];
                        }
                        d.data_mut()[k] += acc;
                    }
                }
                self.seed(adj, *v, d);
            }
            Op::Linear { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / cin;
                if self.rg(*x) {
                    let wt = gemm::transpose(wv.data(), cin, cout);
                    let dx = gemm::matmul(g.data(), &wt, rows, cout, cin);
                    self.seed(adj, *x, Tensor::from_vec(xv.shape(), dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; cin * cout];
                    gemm::matmul_at_b_acc(&mut dw, xv.data(), g.data(), rows, cin, cout);
                    self.seed(adj, *w, Tensor::from_vec(&[cin, cout], dw));
                }
            }
            Op::LinearBias { x, w, b, act } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / cin;
                // pull the cotangent through the activation; post-activation
                // sign matches pre-activation sign for leaky slopes
                let gated;
                let g_eff: &Tensor = match act {
                    Act::Linear => g,
                    Act::Leaky(slope) => {
                        let y = &self.nodes[idx].value;
                        gated = g.zip_map(y, |gi, yi| if yi > 0.0 { gi } else { slope * gi });
                        &gated
                    }
                };
                if self.rg(*x) {
                    let wt = gemm::transpose(wv.data(), cin, cout);
                    let dx = gemm::matmul(g_eff.data(), &wt, rows, cout, cin);
                    self.seed(adj, *x, Tensor::from_vec(xv.shape(), dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; cin * cout];
                    gemm::matmul_at_b_acc(&mut dw, xv.data(), g_eff.data(), rows, cin, cout);
                    self.seed(adj, *w, Tensor::from_vec(&[cin, cout], dw));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; cout];
                    for r in 0..rows {
                        let grow = &g_eff.data()[r * cout..(r + 1) * cout];
                        for (o, &gv) in db.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                    self.seed(adj, *b, Tensor::from_vec(&[cout], db));
                }
            }
            Op::Conv2d {
                x,
                kernel,
                padding,
                mask,
            } => {
                let k_eff = match mask {
                    Some(m) => self.value(*kernel).mul(m),
                    None => self.value(*kernel).clone(),
                };
                if self.rg(*x) {
                    self.seed(adj, *x, convops::conv2d_transpose_batch(g, &k_eff, *padding));
                }
                if self.rg(*kernel) {
                    let ks = self.value(*kernel).shape();
                    let mut dk =
                        convops::conv2d_weight_grad(self.value(*x), g, ks[2], ks[3], *padding);
                    if let Some(m) = mask {
                        dk = dk.mul(m);
                    }
                    self.seed(adj, *kernel, dk);
                }
            }
            Op::Gcl {
                x,
                theta0,
                theta1,
                ahat,
            } => {
                let xv = self.value(*x);
                let (b, n, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                if self.rg(*x) {
                    let dx = convops::gcl_transpose_batch(
                        g,
                        self.value(*theta0),
                        self.value(*theta1),
                        ahat,
                    );
                    self.seed(adj, *x, dx);
                }
                if self.rg(*theta0) {
                    let mut d0 = vec![0.0; f * f];
                    gemm::matmul_at_b_acc(&mut d0, xv.data(), g.data(), b * n, f, f);
                    self.seed(adj, *theta0, Tensor::from_vec(&[f, f], d0));
                }
                if self.rg(*theta1) {
                    // θ1 sees Â·x as its effective input
                    let mut ax = Tensor::zeros(&[b, n, f]);
                    for bi in 0..b {
                        gemm::matmul_acc(
                            &mut ax.data_mut()[bi * n * f..(bi + 1) * n * f],
                            ahat.data(),
                            &xv.data()[bi * n * f..(bi + 1) * n * f],
                            n,
                            n,
                            f,
                        );
                    }
                    let mut d1 = vec![0.0; f * f];
                    gemm::matmul_at_b_acc(&mut d1, ax.data(), g.data(), b * n, f, f);
                    self.seed(adj, *theta1, Tensor::from_vec(&[f, f], d1));
                }
            }
            Op::Householder {
                x,
                vectors,
                transposed,
            } => {
                let vecs: Vec<Vec<f64>> = vectors
                    .iter()
                    .map(|&v| self.value(v).data().to_vec())
                    .collect();
                let need_vec_grads = vectors.iter().any(|&v| self.rg(v));
                let (dx, dvs) = householder_backward(
                    self.value(*x),
                    &self.nodes[idx].value,
                    &vecs,
                    *transposed,
                    g,
                    need_vec_grads,
                );
                if self.rg(*x) {
                    self.seed(adj, *x, dx);
                }
                if need_vec_grads {
                    for (&vid, dv) in vectors.iter().zip(dvs) {
                        self.seed(adj, vid, dv);
                    }
                }
            }
            Op::PairEdgeAffine { x, w, b, act } => {
                let xv = self.value(*x);
                let s = xv.shape().to_vec();
                let (bb, n, f) = (s[0], s[1], s[2]);
                let wv = self.value(*w);
                let h = wv.shape()[1];
                let y = &self.nodes[idx].value;
                let slope = match act {
                    Act::Linear => 1.0,
                    Act::Leaky(sl) => *sl,
                };
                // stream the cotangent once, gating by the stored output
                // sign, into per-node accumulators for both weight halves
                let rows = bb * n;
                let mut dxa = vec![0.0; rows * h];
                let mut dxb = vec![0.0; rows * h];
                let gd = g.data();
                let yd = y.data();
                let mut idx_flat = 0;
                for bi in 0..bb {
                    for i in 0..n {
                        let da = &mut dxa[(bi * n + i) * h..(bi * n + i + 1) * h];
                        for j in 0..n {
                            if j == i {
                                continue;
                            }
                            let base = idx_flat * h;
                            idx_flat += 1;
                            // borrow both accumulators without overlap
                            for t in 0..h {
                                let mut gv = gd[base + t];
                                if yd[base + t] <= 0.0 {
                                    gv *= slope;
                                }
                                da[t] += gv;
                                dxb[(bi * n + j) * h + t] += gv;
                            }
                        }
                    }
                }
                let (w_top, w_bot) = wv.data().split_at(f * h);
                if self.rg(*x) {
                    // dx = dxa·w_topᵀ + dxb·w_botᵀ
                    let wt_t = gemm::transpose(w_top, f, h);
                    let wb_t = gemm::transpose(w_bot, f, h);
                    let mut dx = gemm::matmul(&dxa, &wt_t, rows, h, f);
                    gemm::matmul_acc(&mut dx, &dxb, &wb_t, rows, h, f);
                    self.seed(adj, *x, Tensor::from_vec(&s, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; 2 * f * h];
                    {
                        let (top, bot) = dw.split_at_mut(f * h);
                        gemm::matmul_at_b_acc(top, xv.data(), &dxa, rows, f, h);
                        gemm::matmul_at_b_acc(bot, xv.data(), &dxb, rows, f, h);
                    }
                    self.seed(adj, *w, Tensor::from_vec(&[2 * f, h], dw));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; h];
                    for r in 0..rows {
                        let row = &dxa[r * h..(r + 1) * h];
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.seed(adj, *b, Tensor::from_vec(&[h], db));
                }
            }
            Op::PairConcatOffdiag(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (b, n, f) = (xs[0], xs[1], xs[2]);
                let mut d = Tensor::zeros(&xs);
                let gd = g.data();
                let dd = d.data_mut();
                for bi in 0..b {
                    for i in 0..n {
                        let mut slot = 0;
                        for j in 0..n {
                            if j == i {
                                continue;
                            }
                            let base = (((bi * n + i) * (n - 1)) + slot) * 2 * f;
                            for k in 0..f {
                                dd[(bi * n + i) * f + k] += gd[base + k];
                                dd[(bi * n + j) * f + k] += gd[base + f + k];
                            }
                            slot += 1;
                        }
                    }
                }
                self.seed(adj, *x, d);
            }
            Op::SumAxis { x, axis } => {
                let xs = self.value(*x).shape().to_vec();
                let (outer, len, inner) = split_axis(&xs, *axis);
                let mut d = Tensor::zeros(&xs);
                let gd = g.data();
                let dd = d.data_mut();
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        let gbase = o * inner;
                        for i in 0..inner {
                            dd[base + i] = gd[gbase + i];
                        }
                    }
                }
                self.seed(adj, *x, d);
            }
            Op::SliceLast { x, start, len } => {
                let xs = self.value(*x).shape().to_vec();
                let width = *xs.last().unwrap();
                let rows = self.value(*x).numel() / width;
                let mut d = Tensor::zeros(&xs);
                for r in 0..rows {
                    d.data_mut()[r * width + start..r * width + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.seed(adj, *x, d);
            }
            Op::ConcatLast(a, b) => {
                let asp = self.value(*a).shape().to_vec();
                let bsp = self.value(*b).shape().to_vec();
                let (wa, wb) = (*asp.last().unwrap(), *bsp.last().unwrap());
                let rows = self.value(*a).numel() / wa;
                let mut da = Tensor::zeros(&asp);
                let mut db = Tensor::zeros(&bsp);
                for r in 0..rows {
                    let base = r * (wa + wb);
                    da.data_mut()[r * wa..(r + 1) * wa]
                        .copy_from_slice(&g.data()[base..base + wa]);
                    db.data_mut()[r * wb..(r + 1) * wb]
                        .copy_from_slice(&g.data()[base + wa..base + wa + wb]);
                }
                self.seed(adj, *a, da);
                self.seed(adj, *b, db);
            }
            Op::ConvExpLogdet { kernel, hw } => {
                let ks = self.value(*kernel).shape().to_vec();
                let (c, kh, kw) = (ks[0], ks[2], ks[3]);
                let gs = g.data()[0] * hw;
                let mut d = Tensor::zeros(&ks);
                for ci in 0..c {
                    d.data_mut()[((ci * c + ci) * kh + kh / 2) * kw + kw / 2] = gs;
                }
                self.seed(adj, *kernel, d);
            }
            Op::GclExpLogdet { theta0, n } => {
                let f = self.value(*theta0).shape()[0];
                let gs = g.data()[0] * n;
                let mut d = Tensor::zeros(&[f, f]);
                for i in 0..f {
                    d.data_mut()[i * f + i] = gs;
                }
                self.seed(adj, *theta0, d);
            }
            Op::LogAbsDet(w) => {
                let wv = self.value(*w);
                let c = wv.shape()[0];
                let m = DenseMatrix::from_vec(c, c, wv.data().to_vec());
                let inv = invert(&m)?;
                let inv_t = inv.transpose();
                self.seed(
                    adj,
                    *w,
                    Tensor::from_vec(&[c, c], inv_t.data().to_vec()).scale(g.data()[0]),
                );
            }
            Op::Reshape(x) => {
                self.seed(adj, *x, g.reshaped(self.value(*x).shape()));
            }
            Op::Transpose2d(x) => {
                let s = g.shape();
                let (m, n) = (s[0], s[1]);
                self.seed(
                    adj,
                    *x,
                    Tensor::from_vec(&[n, m], gemm::transpose(g.data(), m, n)),
                );
            }
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Householder product applied per spatial position of [b, c, h, w].
/// Forward order applies the last vector first (matching
/// [`crate::linop::householder_apply`]); `transposed` reverses it.
fn householder_batch(x: &Tensor, vecs: &[Vec<f64>], transposed: bool) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "householder expects [b, c, h, w]");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; c];
    let order: Vec<&Vec<f64>> = if transposed {
        vecs.iter().collect()
    } else {
        vecs.iter().rev().collect()
    };
    for bi in 0..b {
        for p in 0..h * w {
            for ci in 0..c {
                buf[ci] = data[(bi * c + ci) * h * w + p];
            }
            for v in &order {
                reflect(v, &mut buf);
            }
            for ci in 0..c {
                data[(bi * c + ci) * h * w + p] = buf[ci];
            }
        }
    }
    out
}

fn reflect(v: &[f64], x: &mut [f64]) {
    let norm_sq: f64 = v.iter().map(|a| a * a).sum();
    let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    let f = 2.0 * dot / norm_sq;
    for (xi, vi) in x.iter_mut().zip(v) {
        *xi -= f * vi;
    }
}

/// Reverse pass through the reflection product. Intermediate inputs are
/// reconstructed from the stored output by undoing one reflection at a
/// time (each H is its own inverse).
fn householder_backward(
    _x_in: &Tensor,
    y_out: &Tensor,
    vecs: &[Vec<f64>],
    transposed: bool,
    g: &Tensor,
    need_vec_grads: bool,
) -> (Tensor, Vec<Tensor>) {
    let s = y_out.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    // application order of vector indices in the forward pass
    let order: Vec<usize> = if transposed {
        (0..vecs.len()).collect()
    } else {
        (0..vecs.len()).rev().collect()
    };
    let mut dx = g.clone();
    let mut dvs: Vec<Tensor> = vecs.iter().map(|v| Tensor::zeros(&[v.len()])).collect();
    // a single-channel reflection is the constant map -1: the vector
    // gradient vanishes identically and must not pick up rounding noise
    let need_vec_grads = need_vec_grads && c > 1;
    // walk reflections outermost-first, peeling the output back one step
    let mut cur = y_out.clone();
    let mut xbuf = vec![0.0; c];
    let mut gbuf = vec![0.0; c];
    for &vi in order.iter().rev() {
        let v = &vecs[vi];
        let norm_sq: f64 = v.iter().map(|a| a * a).sum();
        let norm = norm_sq.sqrt();
        let uhat: Vec<f64> = v.iter().map(|a| a / norm).collect();
        // input to this reflection
        let curd = cur.data_mut();
        let dxd = dx.data_mut();
        let dv = dvs[vi].data_mut();
        for bi in 0..b {
            for p in 0..hw {
                for ci in 0..c {
                    xbuf[ci] = curd[(bi * c + ci) * hw + p];
                    gbuf[ci] = dxd[(bi * c + ci) * hw + p];
                }
                // reconstruct the reflection input
                reflect(v, &mut xbuf);
                if need_vec_grads {
                    let udx: f64 = uhat.iter().zip(&xbuf).map(|(a, b)| a * b).sum();
                    let udg: f64 = uhat.iter().zip(&gbuf).map(|(a, b)| a * b).sum();
                    // d/dû of (x - 2û ûᵀx) applied to cotangent g
                    // = -2 (g (ûᵀx) + (ûᵀg) x); then project through the
                    // normalization û = v/‖v‖.
                    let mut du = vec![0.0; c];
                    for ci in 0..c {
                        du[ci] = -2.0 * (gbuf[ci] * udx + udg * xbuf[ci]);
                    }
                    let udu: f64 = uhat.iter().zip(&du).map(|(a, b)| a * b).sum();
                    for ci in 0..c {
                        dv[ci] += (du[ci] - udu * uhat[ci]) / norm;
                    }
                }
                // cotangent through H (symmetric)
                reflect(v, &mut gbuf);
                for ci in 0..c {
                    curd[(bi * c + ci) * hw + p] = xbuf[ci];
                    dxd[(bi * c + ci) * hw + p] = gbuf[ci];
                }
            }
        }
    }
    (dx, dvs)
}

/// Shared forward of the fused first edge layer; the tape op and the pure
/// conditioner path both call this so their outputs agree bit for bit.
pub fn pair_edge_affine_forward(xv: &Tensor, wv: &Tensor, bv: &Tensor, act: Act) -> Tensor {
    let s = xv.shape();
    assert_eq!(s.len(), 3, "pair_edge_affine expects [b, n, f]");
    let (bb, n, f) = (s[0], s[1], s[2]);
    assert_eq!(wv.shape()[0], 2 * f, "edge weight rows must be 2f");
    let h = wv.shape()[1];
    assert_eq!(bv.numel(), h);
    // per-node projections through the two halves of the weight
    let rows = bb * n;
    let (w_top, w_bot) = wv.data().split_at(f * h);
    let xa = gemm::matmul_bias_act(xv.data(), w_top, Some(bv.data()), Act::Linear, rows, f, h);
    let xb = gemm::matmul(xv.data(), w_bot, rows, f, h);
    let mut out = Vec::with_capacity(bb * n * (n - 1) * h);
    let slope = match act {
        Act::Linear => 1.0,
        Act::Leaky(sl) => sl,
    };
    for bi in 0..bb {
        for i in 0..n {
            let ai = &xa[(bi * n + i) * h..(bi * n + i + 1) * h];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let bj = &xb[(bi * n + j) * h..(bi * n + j + 1) * h];
                for (u, v) in ai.iter().zip(bj) {
                    let mut val = u + v;
                    if val < 0.0 {
                        val *= slope;
                    }
                    out.push(val);
                }
            }
        }
    }
    Tensor::from_vec(&[bb, n, n - 1, h], out)
}

pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints[id.0].as_ref()
    }

    /// Gradient for a parameter leaf; detached parameters (no path to the
    /// loss) yield zeros and are flagged.
    pub fn param_grad(&self, id: NodeId, shape: &[usize]) -> (Tensor, bool) {
        match &self.adjoints[id.0] {
            Some(t) => (t.clone(), false),
            None => (Tensor::zeros(shape), true),
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer with decay rates (0.9, 0.99) and bias
/// correction.
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, param_shapes: &[Vec<usize>]) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            step_count: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step_count += 1;
        let b1c = 1.0 - self.beta1.powi(self.step_count as i32);
        let b2c = 1.0 - self.beta2.powi(self.step_count as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / b1c;
                let vhat = vd[i] / b2c;
                pd[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Central-difference check of a scalar function built on a fresh tape from
/// the given parameters. Returns the largest relative error over all
/// parameter entries, with denominator max(|analytic|, |numeric|, 1e-8).
pub fn gradcheck<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(eps > 0.0);
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    if !self_finite(tape.value(loss)) {
        return Err(Error::NonFinite("gradcheck loss".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.param_grad(id, p.shape()).0)
        .collect();

    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let orig = p.data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let up = eval_scalar(&mut f, &work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let down = eval_scalar(&mut f, &work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn eval_scalar<F>(f: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("gradcheck evaluation".into()));
    }
    Ok(v)
}

fn self_finite(t: &Tensor) -> bool {
    t.is_finite()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn detached_parameter_is_flagged() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let unused = tape.param(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let (g, detached) = grads.param_grad(unused, &[2]);
        assert!(detached);
        assert_eq!(g.data(), &[0.0, 0.0]);
        let (_, attached) = grads.param_grad(x, &[2]);
        assert!(!attached);
    }

    #[test]
    fn elementwise_primitives_match_finite_differences() {
        let mut rng = Rng::seeded(71);
        // inputs kept away from the leaky-relu kink
        let x0 = Tensor::from_vec(
            &[6],
            (0..6)
                .map(|_| {
                    let v = rng.normal();
                    v + 0.3 * v.signum()
                })
                .collect(),
        );
        let y0 = Tensor::randn(&mut rng, &[6], 1.0);
        type Build = fn(&mut Tape, NodeId, NodeId) -> NodeId;
        let builders: Vec<(&str, Build)> = vec![
            ("tanh", |t, x, _| t.tanh(x)),
            ("sigmoid", |t, x, _| t.sigmoid(x)),
            ("exp", |t, x, _| t.exp(x)),
            ("leaky", |t, x, _| t.leaky_relu(x, 0.1)),
            ("mul", |t, x, y| t.mul(x, y)),
            ("add", |t, x, y| t.add(x, y)),
            ("sub", |t, x, y| t.sub(x, y)),
            ("affine", |t, x, _| {
                let a = t.mul_scalar(x, 1.7);
                t.add_scalar(a, -0.3)
            }),
        ];
        for (name, build) in builders {
            let err = gradcheck(
                |tape, ids| {
                    let out = build(tape, ids[0], ids[1]);
                    let w = tape.mul(out, out);
                    Ok(tape.sum_all(w))
                },
                &[x0.clone(), y0.clone()],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{name}: {err:.3e}");
        }
    }

    #[test]
    fn ln_gradient() {
        let x0 = Tensor::from_vec(&[4], vec![0.5, 1.5, 2.5, 0.9]);
        let err = gradcheck(
            |tape, ids| {
                let l = tape.ln(ids[0]);
                Ok(tape.sum_all(l))
            },
            &[x0],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err:.3e}");
    }

    #[test]
    fn linear_and_broadcast_gradients() {
        let mut rng = Rng::seeded(72);
        let x = Tensor::randn(&mut rng, &[3, 4, 2], 1.0);
        let w = Tensor::randn(&mut rng, &[2, 5], 1.0);
        let bias = Tensor::randn(&mut rng, &[5], 1.0);
        let err = gradcheck(
            |tape, ids| {
                let y = tape.linear(ids[0], ids[1]);
                let shape = tape.value(y).shape().to_vec();
                let b = tape.broadcast_axis(ids[2], &shape, 2);
                let yb = tape.add(y, b);
                let sq = tape.mul(yb, yb);
                Ok(tape.sum_all(sq))
            },
            &[x, w, bias],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err:.3e}");
    }

    #[test]
    fn conv_masked_gradients() {
        let mut rng = Rng::seeded(73);
        let x = Tensor::randn(&mut rng, &[2, 2, 4, 4], 1.0);
        let k = Tensor::randn(&mut rng, &[2, 2, 3, 3], 0.5);
        let mut mask = Tensor::filled(&[2, 2, 3, 3], 1.0);
        // zero out "future" taps of an arbitrary pattern
        for i in 18..36 {
            mask.data_mut()[i] = 0.0;
        }
        for padding in [Padding::Zero, Padding::Periodic] {
            let err = gradcheck(
                |tape, ids| {
                    let y = tape.conv2d(ids[0], ids[1], padding, Some(mask.clone()));
                    let sq = tape.mul(y, y);
                    Ok(tape.sum_all(sq))
                },
                &[x.clone(), k.clone()],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{padding:?}: {err:.3e}");
        }
    }

    #[test]
    fn gcl_gradients() {
        let mut rng = Rng::seeded(74);
        let x = Tensor::randn(&mut rng, &[2, 4, 3], 1.0);
        let t0 = Tensor::randn(&mut rng, &[3, 3], 0.5);
        let t1 = Tensor::randn(&mut rng, &[3, 3], 0.5);
        let mut ahat = Tensor::filled(&[4, 4], 1.0 / 3.0);
        for i in 0..4 {
            ahat.data_mut()[i * 4 + i] = 0.0;
        }
        let err = gradcheck(
            |tape, ids| {
                let y = tape.gcl(ids[0], ids[1], ids[2], ahat.clone());
                let sq = tape.mul(y, y);
                Ok(tape.sum_all(sq))
            },
            &[x, t0, t1],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err:.3e}");
    }

    #[test]
    fn householder_gradients() {
        let mut rng = Rng::seeded(75);
        let x = Tensor::randn(&mut rng, &[2, 3, 2, 2], 1.0);
        let v1 = Tensor::randn(&mut rng, &[3], 1.0);
        let v2 = Tensor::randn(&mut rng, &[3], 1.0);
        for transposed in [false, true] {
            let err = gradcheck(
                |tape, ids| {
                    let y = tape.householder(ids[0], &[ids[1], ids[2]], transposed);
                    let sq = tape.mul(y, y);
                    let s = tape.sum_all(sq);
                    // mix in a non-orthogonal functional so vector grads
                    // are exercised beyond the norm-preserving case
                    let probe = tape.constant(Tensor::randn(
                        &mut Rng::seeded(7),
                        tape.value(y).shape(),
                        1.0,
                    ));
                    let yp = tape.mul(y, probe);
                    let sp = tape.sum_all(yp);
                    Ok(tape.add(s, sp))
                },
                &[x.clone(), v1.clone(), v2.clone()],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "transposed={transposed}: {err:.3e}");
        }
    }

    #[test]
    fn structure_ops_gradients() {
        let mut rng = Rng::seeded(76);
        let x = Tensor::randn(&mut rng, &[2, 3, 2], 1.0);
        let err = gradcheck(
            |tape, ids| {
                let pc = tape.pair_concat_offdiag(ids[0]);
                let sq = tape.mul(pc, pc);
                let summed = tape.sum_axis(sq, 2);
                let left = tape.slice_last(summed, 0, 2);
                let right = tape.slice_last(summed, 2, 2);
                // also exercise the fused linear+bias path

                let cat = tape.concat_last(left, right);
                let per = tape.sum_per_sample(cat);
                let tot = tape.sum_all(per);
                let r = tape.reshape(tot, &[]);
                Ok(r)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err:.3e}");
    }

    #[test]
    fn logdet_ops_gradients() {
        let mut rng = Rng::seeded(77);
        let k = Tensor::randn(&mut rng, &[2, 2, 3, 3], 0.5);
        let t0 = Tensor::randn(&mut rng, &[3, 3], 0.5);
        let mut w = Tensor::randn(&mut rng, &[3, 3], 0.3);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] += 2.0;
        }
        let err = gradcheck(
            |tape, ids| {
                let a = tape.conv_exp_logdet(ids[0], 16.0);
                let b = tape.gcl_exp_logdet(ids[1], 4.0);
                let c = tape.log_abs_det(ids[2])?;
                let ab = tape.add(a, b);
                Ok(tape.add(ab, c))
            },
            &[k, t0, w],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err:.3e}");
    }

    #[test]
    fn expv_series_zero_kernel_equals_identity_gradient() {
        // with a zero kernel the series is z = x; the gradient w.r.t. x of
        // sum(z ⊙ probe) must equal probe exactly
        let mut rng = Rng::seeded(78);
        let x0 = Tensor::randn(&mut rng, &[1, 2, 3, 3], 1.0);
        let probe = Tensor::randn(&mut rng, &[1, 2, 3, 3], 1.0);
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let k = tape.param(Tensor::zeros(&[2, 2, 3, 3]));
        // unrolled series with T = 4
        let mut z = x;
        let mut pi = x;
        for i in 1..=4 {
            let applied = tape.conv2d(pi, k, Padding::Zero, None);
            pi = tape.mul_scalar(applied, 1.0 / i as f64);
            z = tape.add(z, pi);
        }
        let p = tape.constant(probe.clone());
        let zp = tape.mul(z, p);
        let loss = tape.sum_all(zp);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &probe);
    }

    #[test]
    fn pair_edge_affine_matches_unfused_and_gradchecks() {
        let mut rng = Rng::seeded(80);
        let x = Tensor::randn(&mut rng, &[2, 4, 3], 1.0);
        let w = Tensor::randn(&mut rng, &[6, 8], 0.6);
        let b = Tensor::randn(&mut rng, &[8], 0.3);
        // fused output equals the unfused composition
        let mut tape = Tape::new();
        let (xn, wn, bn) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let fused = tape.pair_edge_affine(xn, wn, bn, Act::Leaky(0.0));
        let pairs = tape.pair_concat_offdiag(xn);
        let unfused = tape.linear_bias_act(pairs, wn, bn, Act::Leaky(0.0));
        assert!(tape.value(fused).max_abs_diff(tape.value(unfused)) < 1e-12);
        // gradients against finite differences
        let err = gradcheck(
            |tape, ids| {
                let y = tape.pair_edge_affine(ids[0], ids[1], ids[2], Act::Leaky(0.1));
                let sq = tape.mul(y, y);
                Ok(tape.sum_all(sq))
            },
            &[x, w, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err:.3e}");
    }

    #[test]
    fn adam_zero_gradient_fixed_point() {
        let shapes = vec![vec![2, 2]];
        let mut adam = Adam::new(0.01, &shapes);
        let mut params = vec![Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])];
        let before = params[0].clone();
        for _ in 0..5 {
            adam.step(&mut params, &[Tensor::zeros(&[2, 2])]);
        }
        assert_eq!(params[0], before);
    }

    #[test]
    fn adam_descends_quadratic() {
        let shapes = vec![vec![3]];
        let mut adam = Adam::new(0.05, &shapes);
        let mut params = vec![Tensor::from_vec(&[3], vec![2.0, -1.5, 0.7])];
        for _ in 0..400 {
            let g = params[0].scale(2.0);
            adam.step(&mut params, &[g]);
        }
        assert!(params[0].linf_norm() < 1e-3);
    }
}
