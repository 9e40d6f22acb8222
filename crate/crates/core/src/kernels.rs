//! Dense matrix-multiply kernels shared by training and analysis.
//!
//! All matrices are row-major slices. Kernels accumulate hierarchically:
//! runs of at most [`K_CHUNK`] consecutive products are summed in the
//! element type, and the run totals are folded into 64-bit accumulators.
//! For `f64` elements this is plain 64-bit accumulation; for `f32` it keeps
//! the rounding error of long reductions at the 64-bit level while the hot
//! inner loops stay at full 32-bit SIMD width.
//!
//! Every output element is produced by exactly one thread with a fixed
//! summation order, so results are bit-identical for any thread count.

use num_traits::Float;
use rayon::prelude::*;

/// Scalar element type for model arithmetic: `f32` (training) or `f64`
/// (gradient checks, evaluation, analysis).
pub trait Elem: Float + Send + Sync + std::fmt::Debug + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Elem for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
}

/// Maximum length of an element-typed partial-sum run.
pub const K_CHUNK: usize = 64;

/// Rows of C assigned to one parallel work item.
const ROW_BLOCK: usize = 16;

/// C += A * B, with A m-by-k, B k-by-n, C m-by-n.
pub fn gemm_nn<E: Elem>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "A shape");
    assert_eq!(b.len(), k * n, "B shape");
    assert_eq!(c.len(), m * n, "C shape");
    if m == 0 || n == 0 {
        return;
    }
    c.par_chunks_mut(n * ROW_BLOCK)
        .enumerate()
        .for_each(|(ci, cc)| {
            let rows = cc.len() / n;
            let i0 = ci * ROW_BLOCK;
            let mut acc32 = vec![E::zero(); n];
            let mut acc64 = vec![0.0f64; n];
            for r in 0..rows {
                let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
                acc64.iter_mut().for_each(|v| *v = 0.0);
                for kb in (0..k).step_by(K_CHUNK) {
                    let ke = (kb + K_CHUNK).min(k);
                    acc32.iter_mut().for_each(|v| *v = E::zero());
                    let mut kk = kb;
                    // two-step unroll over k
                    while kk + 2 <= ke {
                        let a0 = arow[kk];
                        let a1 = arow[kk + 1];
                        let b0 = &b[kk * n..kk * n + n];
                        let b1 = &b[(kk + 1) * n..(kk + 1) * n + n];
                        for j in 0..n {
                            acc32[j] = acc32[j] + a0 * b0[j] + a1 * b1[j];
                        }
                        kk += 2;
                    }
                    if kk < ke {
                        let a0 = arow[kk];
                        let b0 = &b[kk * n..kk * n + n];
                        for j in 0..n {
                            acc32[j] = acc32[j] + a0 * b0[j];
                        }
                    }
                    for j in 0..n {
                        acc64[j] += acc32[j].f64();
                    }
                }
                let crow = &mut cc[r * n..(r + 1) * n];
                for j in 0..n {
                    crow[j] = crow[j] + E::of(acc64[j]);
                }
            }
        });
}

/// C += A^T * B, with A k-by-m, B k-by-n, C m-by-n.
///
/// This is the weight-gradient shape: A holds activations (rows = batch),
/// B holds upstream gradients.
pub fn gemm_tn<E: Elem>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), k * m, "A shape");
    assert_eq!(b.len(), k * n, "B shape");
    assert_eq!(c.len(), m * n, "C shape");
    if m == 0 || n == 0 {
        return;
    }
    c.par_chunks_mut(n * ROW_BLOCK)
        .enumerate()
        .for_each(|(ci, cc)| {
            let rows = cc.len() / n;
            let i0 = ci * ROW_BLOCK;
            let mut acc32 = vec![E::zero(); rows * n];
            let mut acc64 = vec![0.0f64; rows * n];
            for kb in (0..k).step_by(K_CHUNK) {
                let ke = (kb + K_CHUNK).min(k);
                acc32.iter_mut().for_each(|v| *v = E::zero());
                for kk in kb..ke {
                    let arow = &a[kk * m + i0..kk * m + i0 + rows];
                    let brow = &b[kk * n..kk * n + n];
                    for r in 0..rows {
                        let aik = arow[r];
                        let acc = &mut acc32[r * n..(r + 1) * n];
                        for j in 0..n {
                            acc[j] = acc[j] + aik * brow[j];
                        }
                    }
                }
                for (s64, s32) in acc64.iter_mut().zip(acc32.iter()) {
                    *s64 += s32.f64();
                }
            }
            for (cv, s64) in cc.iter_mut().zip(acc64.iter()) {
                *cv = *cv + E::of(*s64);
            }
        });
}

/// C += A * B^T, with A m-by-k, B n-by-k, C m-by-n.
///
/// This is the input-gradient shape: B holds a weight matrix used forward
/// as `x * B`. Implemented by transposing B once and reusing [`gemm_nn`];
/// B is always a weight matrix, small next to the batch-sized A.
pub fn gemm_nt<E: Elem>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    assert_eq!(b.len(), n * k, "B shape");
    let bt = transpose(b, n, k);
    gemm_nn(c, a, &bt, m, k, n);
}

/// Row-major transpose: input m-by-n, output n-by-m.
pub fn transpose<E: Elem>(a: &[E], m: usize, n: usize) -> Vec<E> {
    assert_eq!(a.len(), m * n);
    let mut out = vec![E::zero(); n * m];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Dot product with 64-bit accumulation.
pub fn dot64<E: Elem>(x: &[E], y: &[E]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut total = 0.0f64;
    for (xc, yc) in x.chunks(K_CHUNK).zip(y.chunks(K_CHUNK)) {
        let mut run = E::zero();
        for (&a, &b) in xc.iter().zip(yc.iter()) {
            run = run + a * b;
        }
        total += run.f64();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn rand_vec(r: &mut SplitMix64, len: usize) -> Vec<f64> {
        (0..len).map(|_| r.next_normal()).collect()
    }

    #[test]
    fn gemm_nn_matches_naive_f64() {
        let mut r = SplitMix64::new(1);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (17, 33, 9), (40, 130, 20)] {
            let a = rand_vec(&mut r, m * k);
            let b = rand_vec(&mut r, k * n);
            let want = naive(&a, &b, m, k, n);
            let mut c = vec![0.0f64; m * n];
            gemm_nn(&mut c, &a, &b, m, k, n);
            for (x, y) in c.iter().zip(want.iter()) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn gemm_tn_matches_naive() {
        let mut r = SplitMix64::new(2);
        let (m, k, n) = (13, 150, 11);
        let a = rand_vec(&mut r, k * m); // k-by-m
        let b = rand_vec(&mut r, k * n);
        let at = transpose(&a, k, m);
        let want = naive(&at, &b, m, k, n);
        let mut c = vec![0.0f64; m * n];
        gemm_tn(&mut c, &a, &b, m, k, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn gemm_nt_matches_naive() {
        let mut r = SplitMix64::new(3);
        let (m, k, n) = (9, 31, 14);
        let a = rand_vec(&mut r, m * k);
        let b = rand_vec(&mut r, n * k); // n-by-k
        let bt = transpose(&b, n, k);
        let want = naive(&a, &bt, m, k, n);
        let mut c = vec![0.0f64; m * n];
        gemm_nt(&mut c, &a, &b, m, k, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn gemm_f32_close_to_f64() {
        let mut r = SplitMix64::new(4);
        let (m, k, n) = (21, 300, 17);
        let a = rand_vec(&mut r, m * k);
        let b = rand_vec(&mut r, k * n);
        let want = naive(&a, &b, m, k, n);
        let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let mut c32 = vec![0.0f32; m * n];
        gemm_nn(&mut c32, &a32, &b32, m, k, n);
        for (x, y) in c32.iter().zip(want.iter()) {
            assert!(
                ((*x as f64) - y).abs() < 1e-3 * (1.0 + y.abs()),
                "{x} vs {y}"
            );
        }
    }

    #[test]
    fn gemm_accumulates() {
        let a = vec![1.0f64, 2.0];
        let b = vec![3.0f64, 4.0];
        let mut c = vec![10.0f64];
        gemm_nn(&mut c, &a, &b, 1, 2, 1);
        assert_eq!(c[0], 10.0 + 11.0);
    }

    #[test]
    fn dot64_matches() {
        let mut r = SplitMix64::new(5);
        let x = rand_vec(&mut r, 513);
        let y = rand_vec(&mut r, 513);
        let want: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((dot64(&x, &y) - want).abs() < 1e-9);
    }
}
