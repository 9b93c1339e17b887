//! Raw compute kernels for 2-d convolution and graph convolution.
//!
//! Everything is batched over a leading dimension and works on plain
//! tensors; the operator wrappers in [`crate::linop`] and the tape ops in
//! [`crate::autodiff`] both call into here so forward, adjoint and gradient
//! paths share one implementation. Convolutions use cross-correlation
//! semantics with same-size output; kernels have odd spatial dims.

use serde::{Deserialize, Serialize};

use crate::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    Periodic,
}

#[inline]
fn wrap(i: i64, n: usize) -> usize {
    i.rem_euclid(n as i64) as usize
}

/// y[b,o,i,j] = Σ_{c,dy,dx} k[o,c,dy,dx] · x[b,c,i+dy-my,j+dx-mx]
pub fn conv2d_batch(x: &Tensor, kernel: &Tensor, padding: Padding) -> Tensor {
    let (b, ic, h, w) = {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv input must be [b,c,h,w]");
        (s[0], s[1], s[2], s[3])
    };
    let (oc, kc, kh, kw) = {
        let s = kernel.shape();
        assert_eq!(s.len(), 4, "kernel must be [o,i,kh,kw]");
        (s[0], s[1], s[2], s[3])
    };
    assert_eq!(ic, kc, "channel mismatch: input {ic}, kernel {kc}");
    assert!(kh % 2 == 1 && kw % 2 == 1, "kernel spatial dims must be odd");
    let (my, mx) = ((kh / 2) as i64, (kw / 2) as i64);

    let mut out = Tensor::zeros(&[b, oc, h, w]);
    let xd = x.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for bi in 0..b {
        for o in 0..oc {
            let obase = (bi * oc + o) * h * w;
            for c in 0..ic {
                let xbase = (bi * ic + c) * h * w;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let kv = kd[((o * kc + c) * kh + dy) * kw + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        let oy = dy as i64 - my;
                        let ox = dx as i64 - mx;
                        for i in 0..h {
                            let si = i as i64 + oy;
                            let si = match padding {
                                Padding::Zero => {
                                    if si < 0 || si >= h as i64 {
                                        continue;
                                    }
                                    si as usize
                                }
                                Padding::Periodic => wrap(si, h),
                            };
                            for j in 0..w {
                                let sj = j as i64 + ox;
                                let sj = match padding {
                                    Padding::Zero => {
                                        if sj < 0 || sj >= w as i64 {
                                            continue;
                                        }
                                        sj as usize
                                    }
                                    Padding::Periodic => wrap(sj, w),
                                };
                                od[obase + i * w + j] += kv * xd[xbase + si * w + sj];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv2d_batch`] in its input: x̄ = Mᵀ ȳ for the equivalent
/// matrix M of the convolution.
pub fn conv2d_transpose_batch(y: &Tensor, kernel: &Tensor, padding: Padding) -> Tensor {
    let (b, oc, h, w) = {
        let s = y.shape();
        assert_eq!(s.len(), 4, "conv cotangent must be [b,c,h,w]");
        (s[0], s[1], s[2], s[3])
    };
    let (ko, ic, kh, kw) = {
        let s = kernel.shape();
        (s[0], s[1], s[2], s[3])
    };
    assert_eq!(oc, ko, "channel mismatch: cotangent {oc}, kernel {ko}");
    let (my, mx) = ((kh / 2) as i64, (kw / 2) as i64);

    let mut out = Tensor::zeros(&[b, ic, h, w]);
    let yd = y.data();
    let kd = kernel.data();
    let od = out.data_mut();
    // x̄[b,c,p,q] = Σ_{o,dy,dx} k[o,c,dy,dx] · ȳ[b,o,p-(dy-my),q-(dx-mx)]
    for bi in 0..b {
        for c in 0..ic {
            let obase = (bi * ic + c) * h * w;
            for o in 0..oc {
                let ybase = (bi * oc + o) * h * w;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let kv = kd[((o * ic + c) * kh + dy) * kw + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        let oy = dy as i64 - my;
                        let ox = dx as i64 - mx;
                        for p in 0..h {
                            let si = p as i64 - oy;
                            let si = match padding {
                                Padding::Zero => {
                                    if si < 0 || si >= h as i64 {
                                        continue;
                                    }
                                    si as usize
                                }
                                Padding::Periodic => wrap(si, h),
                            };
                            for q in 0..w {
                                let sj = q as i64 - ox;
                                let sj = match padding {
                                    Padding::Zero => {
                                        if sj < 0 || sj >= w as i64 {
                                            continue;
                                        }
                                        sj as usize
                                    }
                                    Padding::Periodic => wrap(sj, w),
                                };
                                od[obase + p * w + q] += kv * yd[ybase + si * w + sj];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Kernel gradient: k̄[o,c,dy,dx] = Σ_{b,i,j} ȳ[b,o,i,j] · x[b,c,i+dy-my,j+dx-mx]
pub fn conv2d_weight_grad(
    x: &Tensor,
    ybar: &Tensor,
    kh: usize,
    kw: usize,
    padding: Padding,
) -> Tensor {
    let (b, ic, h, w) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (yb, oc, yh, yw) = {
        let s = ybar.shape();
        (s[0], s[1], s[2], s[3])
    };
    assert_eq!((b, h, w), (yb, yh, yw));
    let (my, mx) = ((kh / 2) as i64, (kw / 2) as i64);

    let mut grad = Tensor::zeros(&[oc, ic, kh, kw]);
    let xd = x.data();
    let yd = ybar.data();
    let gd = grad.data_mut();
    for bi in 0..b {
        for o in 0..oc {
            let ybase = (bi * oc + o) * h * w;
            for c in 0..ic {
                let xbase = (bi * ic + c) * h * w;
                for dy in 0..kh {
                    let oy = dy as i64 - my;
                    for dx in 0..kw {
                        let ox = dx as i64 - mx;
                        let mut acc = 0.0;
                        for i in 0..h {
                            let si = i as i64 + oy;
                            let si = match padding {
                                Padding::Zero => {
                                    if si < 0 || si >= h as i64 {
                                        continue;
                                    }
                                    si as usize
                                }
                                Padding::Periodic => wrap(si, h),
                            };
                            for j in 0..w {
                                let sj = j as i64 + ox;
                                let sj = match padding {
                                    Padding::Zero => {
                                        if sj < 0 || sj >= w as i64 {
                                            continue;
                                        }
                                        sj as usize
                                    }
                                    Padding::Periodic => wrap(sj, w),
                                };
                                acc += yd[ybase + i * w + j] * xd[xbase + si * w + sj];
                            }
                        }
                        gd[((o * ic + c) * kh + dy) * kw + dx] += acc;
                    }
                }
            }
        }
    }
    grad
}

/// y[b] = x[b]·θ0 + Â·(x[b]·θ1) for node features x [b,n,f] and the
/// normalized adjacency Â [n,n].
pub fn gcl_batch(x: &Tensor, theta0: &Tensor, theta1: &Tensor, ahat: &Tensor) -> Tensor {
    let (b, n, f) = {
        let s = x.shape();
        assert_eq!(s.len(), 3, "gcl input must be [b,n,f]");
        (s[0], s[1], s[2])
    };
    assert_eq!(theta0.shape(), &[f, f]);
    assert_eq!(theta1.shape(), &[f, f]);
    assert_eq!(ahat.shape(), &[n, n]);

    let mut out = Tensor::zeros(&[b, n, f]);
    // self term over all samples at once
    gemm::matmul_acc(out.data_mut(), x.data(), theta0.data(), b * n, f, f);
    // neighbour term per sample
    let xt1 = gemm::matmul(x.data(), theta1.data(), b * n, f, f);
    for bi in 0..b {
        gemm::matmul_acc(
            &mut out.data_mut()[bi * n * f..(bi + 1) * n * f],
            ahat.data(),
            &xt1[bi * n * f..(bi + 1) * n * f],
            n,
            n,
            f,
        );
    }
    out
}

/// Adjoint of [`gcl_batch`] in its input. Requires Â symmetric, which the
/// graph construction guarantees.
pub fn gcl_transpose_batch(y: &Tensor, theta0: &Tensor, theta1: &Tensor, ahat: &Tensor) -> Tensor {
    let f = theta0.shape()[0];
    let t0t = Tensor::from_vec(&[f, f], gemm::transpose(theta0.data(), f, f));
    let t1t = Tensor::from_vec(&[f, f], gemm::transpose(theta1.data(), f, f));
    gcl_batch(y, &t0t, &t1t, ahat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = Rng::seeded(21);
        let x = Tensor::randn(&mut rng, &[2, 3, 4, 4], 1.0);
        let mut k = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            let idx = ((c * 3 + c) * 3 + 1) * 3 + 1;
            k.data_mut()[idx] = 1.0;
        }
        for padding in [Padding::Zero, Padding::Periodic] {
            assert_eq!(conv2d_batch(&x, &k, padding), x);
            assert_eq!(conv2d_transpose_batch(&x, &k, padding), x);
        }
    }

    #[test]
    fn adjoint_inner_product_identity() {
        let mut rng = Rng::seeded(22);
        for padding in [Padding::Zero, Padding::Periodic] {
            for _ in 0..20 {
                let x = Tensor::randn(&mut rng, &[1, 2, 5, 5], 1.0);
                let y = Tensor::randn(&mut rng, &[1, 2, 5, 5], 1.0);
                let k = Tensor::randn(&mut rng, &[2, 2, 3, 3], 1.0);
                let lhs = conv2d_batch(&x, &k, padding).dot(&y);
                let rhs = x.dot(&conv2d_transpose_batch(&y, &k, padding));
                assert!((lhs - rhs).abs() < 1e-12, "{padding:?}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn weight_grad_matches_finite_difference() {
        let mut rng = Rng::seeded(23);
        for padding in [Padding::Zero, Padding::Periodic] {
            let x = Tensor::randn(&mut rng, &[2, 2, 4, 4], 1.0);
            let ybar = Tensor::randn(&mut rng, &[2, 2, 4, 4], 1.0);
            let k = Tensor::randn(&mut rng, &[2, 2, 3, 3], 0.5);
            let grad = conv2d_weight_grad(&x, &ybar, 3, 3, padding);
            let eps = 1e-6;
            for idx in [0usize, 7, 17, 35] {
                let mut kp = k.clone();
                kp.data_mut()[idx] += eps;
                let mut km = k.clone();
                km.data_mut()[idx] -= eps;
                let fp = conv2d_batch(&x, &kp, padding).dot(&ybar);
                let fm = conv2d_batch(&x, &km, padding).dot(&ybar);
                let fd = (fp - fm) / (2.0 * eps);
                assert!(
                    (grad.data()[idx] - fd).abs() < 1e-6,
                    "{padding:?} idx {idx}: {} vs {fd}",
                    grad.data()[idx]
                );
            }
        }
    }

    #[test]
    fn gcl_zero_theta1_is_per_node_map() {
        let mut rng = Rng::seeded(24);
        let x = Tensor::randn(&mut rng, &[1, 4, 3], 1.0);
        let t0 = Tensor::randn(&mut rng, &[3, 3], 1.0);
        let t1 = Tensor::zeros(&[3, 3]);
        let ahat = Tensor::randn(&mut rng, &[4, 4], 1.0);
        let y = gcl_batch(&x, &t0, &t1, &ahat);
        let expect = gemm::matmul(x.data(), t0.data(), 4, 3, 3);
        assert!(y
            .data()
            .iter()
            .zip(&expect)
            .all(|(a, b)| (a - b).abs() < 1e-14));
    }
}
