//! Small dense matrix kernels, row-major `f64` slices.
//!
//! Row-blocked axpy order: four A rows share each B row, which keeps the
//! hot loop in registers and quadruples arithmetic intensity; with the
//! sizes used here (conditioner layers up to 64 wide, batched rows in the
//! tens of thousands) this runs within a small factor of peak without
//! packing. Outputs are written through `extend_from_slice`, never
//! zero-filled first, which matters because the batched edge tensors are
//! tens of megabytes and would otherwise pay a memset per allocation.

/// Elementwise activation fused into the matmul epilogue.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Act {
    Linear,
    /// max(x, slope·x); slope 0 is the plain rectifier.
    Leaky(f64),
}

#[inline]
fn apply_act(act: Act, v: &mut [f64]) {
    if let Act::Leaky(slope) = act {
        for x in v {
            if *x < 0.0 {
                *x *= slope;
            }
        }
    }
}

/// a[m,k] · b[k,n], freshly allocated without a zeroing pass.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_bias_act(a, b, None, Act::Linear, m, k, n)
}

/// Fraction of zeros in a sampled prefix; rectifier activations leave
/// about half the entries exactly zero, where the scalar skip-on-zero loop
/// beats the row-blocked one.
fn mostly_sparse(a: &[f64]) -> bool {
    let probe = a.len().min(1024);
    if probe == 0 {
        return false;
    }
    let zeros = a[..probe].iter().filter(|v| **v == 0.0).count();
    zeros * 4 >= probe
}

/// 4-row microkernel over 8-wide f64 vectors; the batched conditioner
/// layers (n = 16 or 64) spend most of the training flops here.
#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::Act;
    use std::arch::x86_64::*;

    /// Safety: caller checks avx512f support; n must be a multiple of 8
    /// and at most 64; slices must have the documented lengths.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn matmul_bias_act(
        a: &[f64],
        b: &[f64],
        bias: Option<&[f64]>,
        act: Act,
        m: usize,
        k: usize,
        n: usize,
        out: &mut Vec<f64>,
    ) {
        debug_assert_eq!(n % 8, 0);
        let nv = n / 8;
        debug_assert!(nv <= 8);
        let slope = match act {
            Act::Linear => 1.0,
            Act::Leaky(s) => s,
        };
        unsafe {
            let vslope = _mm512_set1_pd(slope);
            let base0 = out.len();
            out.reserve(m * n);
            out.set_len(base0 + m * n);
            let op = out.as_mut_ptr().add(base0);
            let epilogue = |acc: __m512d, v: usize| -> __m512d {
                let mut r = acc;
                if let Some(bv) = bias {
                    r = _mm512_add_pd(r, _mm512_loadu_pd(bv.as_ptr().add(v * 8)));
                }
                if slope != 1.0 {
                    // max(x, slope·x) is the leaky rectifier for slope < 1
                    r = _mm512_max_pd(r, _mm512_mul_pd(r, vslope));
                }
                r
            };
            let mut i = 0;
            while i + 4 <= m {
                let mut acc = [[_mm512_setzero_pd(); 8]; 4];
                for p in 0..k {
                    let bbase = b.as_ptr().add(p * n);
                    let a0 = _mm512_set1_pd(*a.get_unchecked(i * k + p));
                    let a1 = _mm512_set1_pd(*a.get_unchecked((i + 1) * k + p));
                    let a2 = _mm512_set1_pd(*a.get_unchecked((i + 2) * k + p));
                    let a3 = _mm512_set1_pd(*a.get_unchecked((i + 3) * k + p));
                    for v in 0..nv {
                        let bv = _mm512_loadu_pd(bbase.add(v * 8));
                        acc[0][v] = _mm512_fmadd_pd(a0, bv, acc[0][v]);
                        acc[1][v] = _mm512_fmadd_pd(a1, bv, acc[1][v]);
                        acc[2][v] = _mm512_fmadd_pd(a2, bv, acc[2][v]);
                        acc[3][v] = _mm512_fmadd_pd(a3, bv, acc[3][v]);
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    for v in 0..nv {
                        _mm512_storeu_pd(op.add((i + r) * n + v * 8), epilogue(row[v], v));
                    }
                }
                i += 4;
            }
            while i < m {
                let mut acc = [_mm512_setzero_pd(); 8];
                for p in 0..k {
                    let bbase = b.as_ptr().add(p * n);
                    let a0 = _mm512_set1_pd(*a.get_unchecked(i * k + p));
                    for v in 0..nv {
                        let bv = _mm512_loadu_pd(bbase.add(v * 8));
                        acc[v] = _mm512_fmadd_pd(a0, bv, acc[v]);
                    }
                }
                for v in 0..nv {
                    _mm512_storeu_pd(op.add(i * n + v * 8), epilogue(acc[v], v));
                }
                i += 1;
            }
        }
    }

    /// c[k,n] += aᵀ·b with C resident in L1; four B rows are held in
    /// registers per pass, column-tiled by 32.
    ///
    /// Safety: caller checks avx512f; n is a multiple of 8 and at most 64.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn matmul_at_b_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
        unsafe {
            let cp = c.as_mut_ptr();
            let mut col = 0;
            while col < n {
                let cw = (n - col).min(32);
                let nv = cw / 8;
                let mut r = 0;
                while r + 4 <= m {
                    let mut brows = [[_mm512_setzero_pd(); 4]; 4];
                    for (ri, row) in brows.iter_mut().enumerate() {
                        let bbase = b.as_ptr().add((r + ri) * n + col);
                        for (v, slot) in row.iter_mut().enumerate().take(nv) {
                            *slot = _mm512_loadu_pd(bbase.add(v * 8));
                        }
                    }
                    for p in 0..k {
                        let a0 = _mm512_set1_pd(*a.get_unchecked(r * k + p));
                        let a1 = _mm512_set1_pd(*a.get_unchecked((r + 1) * k + p));
                        let a2 = _mm512_set1_pd(*a.get_unchecked((r + 2) * k + p));
                        let a3 = _mm512_set1_pd(*a.get_unchecked((r + 3) * k + p));
                        let crow = cp.add(p * n + col);
                        for v in 0..nv {
                            let mut cv = _mm512_loadu_pd(crow.add(v * 8));
                            cv = _mm512_fmadd_pd(a0, brows[0][v], cv);
                            cv = _mm512_fmadd_pd(a1, brows[1][v], cv);
                            cv = _mm512_fmadd_pd(a2, brows[2][v], cv);
                            cv = _mm512_fmadd_pd(a3, brows[3][v], cv);
                            _mm512_storeu_pd(crow.add(v * 8), cv);
                        }
                    }
                    r += 4;
                }
                while r < m {
                    let bbase = b.as_ptr().add(r * n + col);
                    let mut brow = [_mm512_setzero_pd(); 4];
                    for (v, slot) in brow.iter_mut().enumerate().take(nv) {
                        *slot = _mm512_loadu_pd(bbase.add(v * 8));
                    }
                    for p in 0..k {
                        let ap = *a.get_unchecked(r * k + p);
                        if ap == 0.0 {
                            continue;
                        }
                        let av = _mm512_set1_pd(ap);
                        let crow = cp.add(p * n + col);
                        for v in 0..nv {
                            let mut cv = _mm512_loadu_pd(crow.add(v * 8));
                            cv = _mm512_fmadd_pd(av, brow[v], cv);
                            _mm512_storeu_pd(crow.add(v * 8), cv);
                        }
                    }
                    r += 1;
                }
                col += cw;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn avx512_usable(n: usize) -> bool {
    n % 8 == 0 && n <= 64 && is_x86_feature_detected!("avx512f")
}

/// act(a[m,k] · b[k,n] + bias[n]) with the bias broadcast over rows.
pub fn matmul_bias_act(
    a: &[f64],
    b: &[f64],
    bias: Option<&[f64]>,
    act: Act,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    #[cfg(target_arch = "x86_64")]
    if avx512_usable(n) {
        let mut out = Vec::with_capacity(m * n);
        unsafe { avx512::matmul_bias_act(a, b, bias, act, m, k, n, &mut out) };
        return out;
    }
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; 4 * n];
    let init_row = |dst: &mut [f64]| match bias {
        Some(bv) => dst.copy_from_slice(bv),
        None => dst.fill(0.0),
    };

    let mut i = 0;
    if mostly_sparse(a) {
        // scalar rows with skip-on-zero
        while i < m {
            let row = &mut acc[..n];
            init_row(row);
            let arow = &a[i * k..(i + 1) * k];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
            apply_act(act, row);
            out.extend_from_slice(&acc[..n]);
            i += 1;
        }
        return out;
    }
    while i + 4 <= m {
        {
            let (r0, rest) = acc.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            init_row(r0);
            init_row(r1);
            init_row(r2);
            init_row(r3);
            for p in 0..k {
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    let bv = brow[j];
                    r0[j] += a0 * bv;
                    r1[j] += a1 * bv;
                    r2[j] += a2 * bv;
                    r3[j] += a3 * bv;
                }
            }
        }
        apply_act(act, &mut acc);
        out.extend_from_slice(&acc);
        i += 4;
    }
    while i < m {
        let row = &mut acc[..n];
        init_row(row);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
        apply_act(act, row);
        out.extend_from_slice(&acc[..n]);
        i += 1;
    }
    out
}

/// c[m,n] += a[m,k] · b[k,n]
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (head, _) = c[i * n..].split_at_mut(4 * n);
        let (r0, rest) = head.split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in crow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
        i += 1;
    }
}

/// c[k,n] += aᵀ · b for a[m,k], b[m,n]; the weight-gradient contraction.
/// C stays small (k·n), so four B rows stream against it at a time.
pub fn matmul_at_b_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    #[cfg(target_arch = "x86_64")]
    if avx512_usable(n) {
        unsafe { avx512::matmul_at_b_acc(c, a, b, m, k, n) };
        return;
    }
    let mut r = 0;
    if mostly_sparse(a) {
        while r < m {
            let arow = &a[r * k..(r + 1) * k];
            let brow = &b[r * n..(r + 1) * n];
            for (p, &arp) in arow.iter().enumerate() {
                if arp == 0.0 {
                    continue;
                }
                let crow = &mut c[p * n..(p + 1) * n];
                for (o, &bv) in crow.iter_mut().zip(brow) {
                    *o += arp * bv;
                }
            }
            r += 1;
        }
        return;
    }
    while r + 4 <= m {
        for p in 0..k {
            let a0 = a[r * k + p];
            let a1 = a[(r + 1) * k + p];
            let a2 = a[(r + 2) * k + p];
            let a3 = a[(r + 3) * k + p];
            if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                continue;
            }
            let b0 = &b[r * n..(r + 1) * n];
            let b1 = &b[(r + 1) * n..(r + 2) * n];
            let b2 = &b[(r + 2) * n..(r + 3) * n];
            let b3 = &b[(r + 3) * n..(r + 4) * n];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        r += 4;
    }
    while r < m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (p, &arp) in arow.iter().enumerate() {
            if arp == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (o, &bv) in crow.iter_mut().zip(brow) {
                *o += arp * bv;
            }
        }
        r += 1;
    }
}

/// Row-major transpose of a[m,n].
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matches_naive() {
        let mut rng = Rng::seeded(9);
        for &(m, k, n) in &[
            (1, 1, 1),
            (3, 4, 5),
            (7, 2, 9),
            (16, 16, 16),
            (13, 5, 8),
            (9, 3, 2),
            // vector-kernel widths, including row tails
            (33, 7, 8),
            (30, 9, 16),
            (17, 64, 64),
        ] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
            let c = matmul(&a, &b, m, k, n);
            let c_ref = naive(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&c_ref) {
                assert!((x - y).abs() < 1e-12);
            }
            // accumulate variant
            let mut c2 = c.clone();
            matmul_acc(&mut c2, &a, &b, m, k, n);
            for (x, y) in c2.iter().zip(&c_ref) {
                assert!((x - 2.0 * y).abs() < 1e-10);
            }
            // aᵀb against transpose + matmul
            let mut g = vec![0.0; k * n];
            matmul_at_b_acc(&mut g, &a, &c_ref, m, k, n);
            let at = transpose(&a, m, k);
            let g_ref = naive(&at, &c_ref, k, m, n);
            for (x, y) in g.iter().zip(&g_ref) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bias_and_activation_epilogue() {
        let mut rng = Rng::seeded(10);
        let (m, k, n) = (6, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let bias: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let c = matmul_bias_act(&a, &b, Some(&bias), Act::Leaky(0.1), m, k, n);
        let c_ref = naive(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut v = c_ref[i * n + j] + bias[j];
                if v < 0.0 {
                    v *= 0.1;
                }
                assert!((c[i * n + j] - v).abs() < 1e-12);
            }
        }
    }
}
