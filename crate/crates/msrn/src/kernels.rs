//! Inner-loop numeric kernels shared by the tape operations.
//!
//! The GEMM variants carry nearly all of the training cost. Each has a
//! register-blocked safe-Rust form plus an AVX2+FMA form selected by runtime
//! feature detection, so performance does not depend on build-time target
//! flags. The column-panel loop runs outermost so each B panel stays
//! cache-hot while the row blocks sweep it; A is small enough to sit in L2
//! for the shapes this crate produces.

#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::{
    __m256d, _mm256_add_pd, _mm256_castpd256_pd128, _mm256_extractf128_pd, _mm256_fmadd_pd,
    _mm256_loadu_pd, _mm256_set1_pd, _mm256_setzero_pd, _mm256_storeu_pd, _mm_add_pd,
    _mm_add_sd, _mm_cvtsd_f64, _mm_unpackhi_pd,
};

#[cfg(target_arch = "x86_64")]
fn use_avx2() -> bool {
    // the detection macro caches its result internally
    is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
}

/// C[m][n] += A[m][k] * B[k][n], all row-major.
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    if use_avx2() {
        unsafe { gemm_nn_avx2(a, b, c, m, k, n) };
        return;
    }
    gemm_nn_scalar(a, b, c, m, k, n);
}

/// C[m][n] += A[m][k] * B[n][k]^T, i.e. C[i][j] += dot(A.row(i), B.row(j)).
///
/// Used where both operands are row-contiguous along the reduction axis
/// (weight gradients, second-order products).
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    if use_avx2() {
        unsafe { gemm_nt_avx2(a, b, c, m, k, n) };
        return;
    }
    gemm_nt_scalar(a, b, c, m, k, n);
}

// ---------------------------------------------------------------------------
// AVX2 + FMA micro-kernels: 4-row blocks against 16-wide (nn) or 4-row (nt)
// panels, with accumulators held in ymm registers across the k loop.

/// 4 x (4*NRV) register tile over a packed B panel (NRV vectors of width 4
/// per k step, laid out contiguously), so every load streams sequentially.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn gemm_nn_tile_packed<const NRV: usize>(
    a: &[f64],
    packed: &[f64],
    c: &mut [f64],
    i: usize,
    j: usize,
    k: usize,
    n: usize,
) {
    const MR: usize = 4;
    let ap = a.as_ptr();
    let pp = packed.as_ptr();
    let cp = c.as_mut_ptr();
    let mut acc = [[_mm256_setzero_pd(); NRV]; MR];
    for kk in 0..k {
        let brow = pp.add(kk * NRV * 4);
        let mut bv = [_mm256_setzero_pd(); NRV];
        for (v, slot) in bv.iter_mut().enumerate() {
            *slot = _mm256_loadu_pd(brow.add(4 * v));
        }
        for r in 0..MR {
            let av = _mm256_set1_pd(*ap.add((i + r) * k + kk));
            for v in 0..NRV {
                acc[r][v] = _mm256_fmadd_pd(av, bv[v], acc[r][v]);
            }
        }
    }
    for (r, row_acc) in acc.iter().enumerate() {
        let crow = cp.add((i + r) * n + j);
        for (v, vec_acc) in row_acc.iter().enumerate() {
            let cur = _mm256_loadu_pd(crow.add(4 * v));
            _mm256_storeu_pd(crow.add(4 * v), _mm256_add_pd(cur, *vec_acc));
        }
    }
}

#[cfg(target_arch = "x86_64")]
thread_local! {
    static PACK: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn gemm_nn_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    let m_main = m / MR * MR;
    PACK.with(|buf| {
        let mut buf = buf.borrow_mut();
        if buf.len() < k * 16 {
            buf.resize(k * 16, 0.0);
        }
        let mut j = 0;
        for width in [16usize, 8, 4] {
            let nrv = width / 4;
            while j + width <= n {
                for kk in 0..k {
                    buf[kk * width..kk * width + width]
                        .copy_from_slice(&b[kk * n + j..kk * n + j + width]);
                }
                let mut i = 0;
                while i < m_main {
                    match nrv {
                        4 => gemm_nn_tile_packed::<4>(a, &buf, c, i, j, k, n),
                        2 => gemm_nn_tile_packed::<2>(a, &buf, c, i, j, k, n),
                        _ => gemm_nn_tile_packed::<1>(a, &buf, c, i, j, k, n),
                    }
                    i += MR;
                }
                if i < m {
                    gemm_nn_edge(a, b, c, i, m, j, j + width, k, n);
                }
                j += width;
            }
        }
        if j < n {
            gemm_nn_edge(a, b, c, 0, m, j, n, k, n);
        }
    });
}

#[cfg(target_arch = "x86_64")]
#[inline]
unsafe fn hsum(v: __m256d) -> f64 {
    let lo = _mm256_castpd256_pd128(v);
    let hi = _mm256_extractf128_pd(v, 1);
    let s = _mm_add_pd(lo, hi);
    _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn gemm_nt_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 4;
    let kv = k / 4 * 4;
    let ap = a.as_ptr();
    let bp = b.as_ptr();
    let mut j = 0;
    while j + NR <= n {
        let mut i = 0;
        while i + MR <= m {
            let mut acc = [[_mm256_setzero_pd(); NR]; MR];
            let mut kk = 0;
            while kk < kv {
                let av = [
                    _mm256_loadu_pd(ap.add(i * k + kk)),
                    _mm256_loadu_pd(ap.add((i + 1) * k + kk)),
                    _mm256_loadu_pd(ap.add((i + 2) * k + kk)),
                    _mm256_loadu_pd(ap.add((i + 3) * k + kk)),
                ];
                let bv = [
                    _mm256_loadu_pd(bp.add(j * k + kk)),
                    _mm256_loadu_pd(bp.add((j + 1) * k + kk)),
                    _mm256_loadu_pd(bp.add((j + 2) * k + kk)),
                    _mm256_loadu_pd(bp.add((j + 3) * k + kk)),
                ];
                for r in 0..MR {
                    for s in 0..NR {
                        acc[r][s] = _mm256_fmadd_pd(av[r], bv[s], acc[r][s]);
                    }
                }
                kk += 4;
            }
            for r in 0..MR {
                for s in 0..NR {
                    let mut total = hsum(acc[r][s]);
                    for kk in kv..k {
                        total += a[(i + r) * k + kk] * b[(j + s) * k + kk];
                    }
                    c[(i + r) * n + (j + s)] += total;
                }
            }
            i += MR;
        }
        while i < m {
            for s in 0..NR {
                c[i * n + j + s] += dot(&a[i * k..i * k + k], &b[(j + s) * k..(j + s) * k + k]);
            }
            i += 1;
        }
        j += NR;
    }
    while j < n {
        for i in 0..m {
            c[i * n + j] += dot(&a[i * k..i * k + k], &b[j * k..j * k + k]);
        }
        j += 1;
    }
}

// ---------------------------------------------------------------------------
// Portable forms.

fn gemm_nn_scalar(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 16;
    let mut j = 0;
    while j + NR <= n {
        let mut i = 0;
        while i + MR <= m {
            let mut acc = [[0.0f64; NR]; MR];
            for kk in 0..k {
                let bv = &b[kk * n + j..kk * n + j + NR];
                for r in 0..MR {
                    let av = a[(i + r) * k + kk];
                    let ac = &mut acc[r];
                    for x in 0..NR {
                        ac[x] += av * bv[x];
                    }
                }
            }
            for (r, ac) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for x in 0..NR {
                    crow[x] += ac[x];
                }
            }
            i += MR;
        }
        if i < m {
            gemm_nn_edge(a, b, c, i, m, j, j + NR, k, n);
        }
        j += NR;
    }
    if j < n {
        gemm_nn_edge(a, b, c, 0, m, j, n, k, n);
    }
}

/// Scalar fallback for tile edges.
fn gemm_nn_edge(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    k: usize,
    n: usize,
) {
    for i in i0..i1 {
        let arow = &a[i * k..i * k + k];
        for j in j0..j1 {
            let mut s = 0.0;
            for (kk, av) in arow.iter().enumerate() {
                s += av * b[kk * n + j];
            }
            c[i * n + j] += s;
        }
    }
}

fn gemm_nt_scalar(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 4;
    const L: usize = 8;
    let kv = k / L * L;
    let mut j = 0;
    while j + NR <= n {
        let mut i = 0;
        while i + MR <= m {
            let mut acc = [[[0.0f64; L]; NR]; MR];
            let mut kk = 0;
            while kk < kv {
                for r in 0..MR {
                    let av = &a[(i + r) * k + kk..(i + r) * k + kk + L];
                    for s in 0..NR {
                        let bv = &b[(j + s) * k + kk..(j + s) * k + kk + L];
                        let ac = &mut acc[r][s];
                        for x in 0..L {
                            ac[x] += av[x] * bv[x];
                        }
                    }
                }
                kk += L;
            }
            for r in 0..MR {
                for s in 0..NR {
                    let mut total: f64 = acc[r][s].iter().sum();
                    for kk in kv..k {
                        total += a[(i + r) * k + kk] * b[(j + s) * k + kk];
                    }
                    c[(i + r) * n + (j + s)] += total;
                }
            }
            i += MR;
        }
        while i < m {
            for s in 0..NR {
                c[i * n + j + s] += dot(&a[i * k..i * k + k], &b[(j + s) * k..(j + s) * k + k]);
            }
            i += 1;
        }
        j += NR;
    }
    while j < n {
        for i in 0..m {
            c[i * n + j] += dot(&a[i * k..i * k + k], &b[j * k..j * k + k]);
        }
        j += 1;
    }
}

/// Lane-blocked dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if use_avx2() {
        return unsafe { dot_avx2(a, b) };
    }
    dot_scalar(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn dot_avx2(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let nv = n / 8 * 8;
    let ap = a.as_ptr();
    let bp = b.as_ptr();
    let mut acc0 = _mm256_setzero_pd();
    let mut acc1 = _mm256_setzero_pd();
    let mut i = 0;
    while i < nv {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(ap.add(i)), _mm256_loadu_pd(bp.add(i)), acc0);
        acc1 = _mm256_fmadd_pd(
            _mm256_loadu_pd(ap.add(i + 4)),
            _mm256_loadu_pd(bp.add(i + 4)),
            acc1,
        );
        i += 8;
    }
    let mut s = hsum(_mm256_add_pd(acc0, acc1));
    for x in nv..n {
        s += a[x] * b[x];
    }
    s
}

fn dot_scalar(a: &[f64], b: &[f64]) -> f64 {
    const L: usize = 8;
    let n = a.len();
    let nv = n / L * L;
    let mut acc = [0.0f64; L];
    let mut i = 0;
    while i < nv {
        let av = &a[i..i + L];
        let bv = &b[i..i + L];
        for x in 0..L {
            acc[x] += av[x] * bv[x];
        }
        i += L;
    }
    let mut s: f64 = acc.iter().sum();
    for x in nv..n {
        s += a[x] * b[x];
    }
    s
}

/// y += alpha * x.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yo, xo) in y.iter_mut().zip(x) {
        *yo += alpha * xo;
    }
}

/// Out-of-place transpose of a row-major [rows][cols] matrix.
pub fn transpose_into(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    debug_assert!(src.len() >= rows * cols && dst.len() >= rows * cols);
    for i in 0..rows {
        let row = &src[i * cols..i * cols + cols];
        for (j, v) in row.iter().enumerate() {
            dst[j * rows + i] = *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_nn_matches_naive_on_awkward_sizes() {
        let mut rng = Rng::new(1);
        for (m, k, n) in [(1, 1, 1), (7, 5, 17), (6, 8, 16), (13, 3, 33), (64, 27, 19)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let want = naive_nn(&a, &b, m, k, n);
            let mut got = vec![0.0; m * n];
            gemm_nn(&a, &b, &mut got, m, k, n);
            let mut got_scalar = vec![0.0; m * n];
            gemm_nn_scalar(&a, &b, &mut got_scalar, m, k, n);
            for ((g, gs), w) in got.iter().zip(&got_scalar).zip(&want) {
                assert!((g - w).abs() < 1e-12, "{m}x{k}x{n}: {g} vs {w}");
                assert!((gs - w).abs() < 1e-12, "scalar {m}x{k}x{n}: {gs} vs {w}");
            }
        }
    }

    #[test]
    fn gemm_nt_matches_naive_on_awkward_sizes() {
        let mut rng = Rng::new(2);
        for (m, k, n) in [(1, 1, 1), (5, 9, 7), (4, 16, 4), (11, 21, 6), (64, 50, 64)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..n * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut want = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for kk in 0..k {
                        want[i * n + j] += a[i * k + kk] * b[j * k + kk];
                    }
                }
            }
            let mut got = vec![0.0; m * n];
            gemm_nt(&a, &b, &mut got, m, k, n);
            let mut got_scalar = vec![0.0; m * n];
            gemm_nt_scalar(&a, &b, &mut got_scalar, m, k, n);
            for ((g, gs), w) in got.iter().zip(&got_scalar).zip(&want) {
                assert!((g - w).abs() < 1e-12, "{m}x{k}x{n}: {g} vs {w}");
                assert!((gs - w).abs() < 1e-12, "scalar {m}x{k}x{n}: {gs} vs {w}");
            }
        }
    }

    #[test]
    fn dot_variants_agree() {
        let mut rng = Rng::new(4);
        for len in [1usize, 7, 8, 31, 100] {
            let a: Vec<f64> = (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12);
            assert!((dot_scalar(&a, &b) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = Rng::new(3);
        let (r, c) = (5, 9);
        let src: Vec<f64> = (0..r * c).map(|_| rng.next_f64()).collect();
        let mut t = vec![0.0; r * c];
        let mut back = vec![0.0; r * c];
        transpose_into(&src, &mut t, r, c);
        transpose_into(&t, &mut back, c, r);
        assert_eq!(src, back);
    }
}
