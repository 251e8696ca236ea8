//! Dense row-major kernels.
//!
//! Every product is computed as a dot product with eight interleaved partial
//! sums that are reduced in a fixed tree order. On x86-64 with AVX2 the lanes
//! map onto vector registers; the portable fallback runs the same lanes in
//! scalar code. Neither path fuses multiply-adds, so both give bit-identical
//! results.

use super::real::Real;

const LANES: usize = 8;

#[inline(always)]
fn reduce<R: Real>(acc: &[R; LANES]) -> R {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

#[inline(always)]
fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = [R::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = R::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    reduce(&acc) + tail
}

/// Two rows of `a` against four rows of `b`; each of the eight results is
/// bit-identical to the corresponding `dot`.
#[inline(always)]
fn dot_2x4<R: Real>(a0: &[R], a1: &[R], b: [&[R]; 4]) -> [[R; 4]; 2] {
    let k = a0.len();
    let full = k - k % LANES;
    let mut acc = [[[R::zero(); LANES]; 4]; 2];
    let mut p = 0;
    while p < full {
        let x0 = &a0[p..p + LANES];
        let x1 = &a1[p..p + LANES];
        for q in 0..4 {
            let y = &b[q][p..p + LANES];
            for l in 0..LANES {
                acc[0][q][l] += x0[l] * y[l];
                acc[1][q][l] += x1[l] * y[l];
            }
        }
        p += LANES;
    }
    let mut out = [[R::zero(); 4]; 2];
    for q in 0..4 {
        let mut t0 = R::zero();
        let mut t1 = R::zero();
        for i in full..k {
            t0 += a0[i] * b[q][i];
            t1 += a1[i] * b[q][i];
        }
        out[0][q] = reduce(&acc[0][q]) + t0;
        out[1][q] = reduce(&acc[1][q]) + t1;
    }
    out
}

#[inline(always)]
fn store<R: Real>(slot: &mut R, v: R, accumulate: bool) {
    if accumulate {
        *slot += v;
    } else {
        *slot = v;
    }
}

#[inline(always)]
fn matmul_nt_impl<R: Real>(
    a: &[R],
    b: &[R],
    c: &mut [R],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let mut i = 0;
    while i + 2 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let mut j = 0;
        while j + 4 <= n {
            let rows = [
                &b[j * k..(j + 1) * k],
                &b[(j + 1) * k..(j + 2) * k],
                &b[(j + 2) * k..(j + 3) * k],
                &b[(j + 3) * k..(j + 4) * k],
            ];
            let d = dot_2x4(a0, a1, rows);
            for q in 0..4 {
                store(&mut c[i * n + j + q], d[0][q], accumulate);
                store(&mut c[(i + 1) * n + j + q], d[1][q], accumulate);
            }
            j += 4;
        }
        while j < n {
            let brow = &b[j * k..(j + 1) * k];
            store(&mut c[i * n + j], dot(a0, brow), accumulate);
            store(&mut c[(i + 1) * n + j], dot(a1, brow), accumulate);
            j += 1;
        }
        i += 2;
    }
    if i < m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            store(&mut c[i * n + j], dot(arow, &b[j * k..(j + 1) * k]), accumulate);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use super::{dot, reduce, store, LANES};
    use std::arch::x86_64::*;

    #[inline(always)]
    unsafe fn tail<R: super::Real>(a: *const R, b: *const R, from: usize, k: usize) -> R {
        let mut t = R::zero();
        for i in from..k {
            t += *a.add(i) * *b.add(i);
        }
        t
    }

    #[inline(always)]
    unsafe fn finish_ps(v: __m256, t: f32) -> f32 {
        let mut lanes = [0f32; LANES];
        _mm256_storeu_ps(lanes.as_mut_ptr(), v);
        reduce(&lanes) + t
    }

    #[inline(always)]
    unsafe fn finish_pd(lo: __m256d, hi: __m256d, t: f64) -> f64 {
        let mut lanes = [0f64; LANES];
        _mm256_storeu_pd(lanes.as_mut_ptr(), lo);
        _mm256_storeu_pd(lanes.as_mut_ptr().add(4), hi);
        reduce(&lanes) + t
    }

    /// Two rows of `a` by four rows of `b`, eight lanes per accumulator.
    #[target_feature(enable = "avx2")]
    pub unsafe fn matmul_nt_f32(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, acc: bool) {
        let full = k - k % LANES;
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut i = 0;
        while i + 2 <= m {
            let (a0, a1) = (pa.add(i * k), pa.add((i + 1) * k));
            let mut j = 0;
            while j + 4 <= n {
                let bq = [pb.add(j * k), pb.add((j + 1) * k), pb.add((j + 2) * k), pb.add((j + 3) * k)];
                let mut s0 = [_mm256_setzero_ps(); 4];
                let mut s1 = [_mm256_setzero_ps(); 4];
                let mut p = 0;
                while p < full {
                    let x0 = _mm256_loadu_ps(a0.add(p));
                    let x1 = _mm256_loadu_ps(a1.add(p));
                    for q in 0..4 {
                        let y = _mm256_loadu_ps(bq[q].add(p));
                        s0[q] = _mm256_add_ps(s0[q], _mm256_mul_ps(x0, y));
                        s1[q] = _mm256_add_ps(s1[q], _mm256_mul_ps(x1, y));
                    }
                    p += LANES;
                }
                for q in 0..4 {
                    let v0 = finish_ps(s0[q], tail(a0, bq[q], full, k));
                    let v1 = finish_ps(s1[q], tail(a1, bq[q], full, k));
                    store(&mut c[i * n + j + q], v0, acc);
                    store(&mut c[(i + 1) * n + j + q], v1, acc);
                }
                j += 4;
            }
            while j < n {
                let brow = &b[j * k..(j + 1) * k];
                store(&mut c[i * n + j], dot(&a[i * k..(i + 1) * k], brow), acc);
                store(&mut c[(i + 1) * n + j], dot(&a[(i + 1) * k..(i + 2) * k], brow), acc);
                j += 1;
            }
            i += 2;
        }
        if i < m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                store(&mut c[i * n + j], dot(arow, &b[j * k..(j + 1) * k]), acc);
            }
        }
    }

    /// Two rows of `a` by two rows of `b`; each eight-lane accumulator spans two registers.
    #[target_feature(enable = "avx2")]
    pub unsafe fn matmul_nt_f64(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, acc: bool) {
        let full = k - k % LANES;
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut i = 0;
        while i + 2 <= m {
            let (a0, a1) = (pa.add(i * k), pa.add((i + 1) * k));
            let mut j = 0;
            while j + 2 <= n {
                let bq = [pb.add(j * k), pb.add((j + 1) * k)];
                let mut lo = [_mm256_setzero_pd(); 4];
                let mut hi = [_mm256_setzero_pd(); 4];
                let mut p = 0;
                while p < full {
                    let x0l = _mm256_loadu_pd(a0.add(p));
                    let x0h = _mm256_loadu_pd(a0.add(p + 4));
                    let x1l = _mm256_loadu_pd(a1.add(p));
                    let x1h = _mm256_loadu_pd(a1.add(p + 4));
                    for q in 0..2 {
                        let yl = _mm256_loadu_pd(bq[q].add(p));
                        let yh = _mm256_loadu_pd(bq[q].add(p + 4));
                        lo[q] = _mm256_add_pd(lo[q], _mm256_mul_pd(x0l, yl));
                        hi[q] = _mm256_add_pd(hi[q], _mm256_mul_pd(x0h, yh));
                        lo[2 + q] = _mm256_add_pd(lo[2 + q], _mm256_mul_pd(x1l, yl));
                        hi[2 + q] = _mm256_add_pd(hi[2 + q], _mm256_mul_pd(x1h, yh));
                    }
                    p += LANES;
                }
                for q in 0..2 {
                    let v0 = finish_pd(lo[q], hi[q], tail(a0, bq[q], full, k));
                    let v1 = finish_pd(lo[2 + q], hi[2 + q], tail(a1, bq[q], full, k));
                    store(&mut c[i * n + j + q], v0, acc);
                    store(&mut c[(i + 1) * n + j + q], v1, acc);
                }
                j += 2;
            }
            while j < n {
                let brow = &b[j * k..(j + 1) * k];
                store(&mut c[i * n + j], dot(&a[i * k..(i + 1) * k], brow), acc);
                store(&mut c[(i + 1) * n + j], dot(&a[(i + 1) * k..(i + 2) * k], brow), acc);
                j += 1;
            }
            i += 2;
        }
        if i < m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                store(&mut c[i * n + j], dot(arow, &b[j * k..(j + 1) * k]), acc);
            }
        }
    }
}

/// Reinterprets `&[R]` as `&[T]` when both are the same type.
fn cast_slice<R: 'static, T: 'static>(s: &[R]) -> Option<&[T]> {
    (std::any::TypeId::of::<R>() == std::any::TypeId::of::<T>())
        // SAFETY: R and T are the same type.
        .then(|| unsafe { std::slice::from_raw_parts(s.as_ptr() as *const T, s.len()) })
}

fn cast_slice_mut<R: 'static, T: 'static>(s: &mut [R]) -> Option<&mut [T]> {
    (std::any::TypeId::of::<R>() == std::any::TypeId::of::<T>())
        // SAFETY: R and T are the same type.
        .then(|| unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr() as *mut T, s.len()) })
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`, or `c += …` when `accumulate` is set.
pub fn matmul_nt<R: Real>(
    a: &[R],
    b: &[R],
    c: &mut [R],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs extent");
    assert_eq!(b.len(), n * k, "rhs extent");
    assert_eq!(c.len(), m * n, "output extent");
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            if let (Some(a), Some(b)) = (cast_slice::<R, f32>(a), cast_slice::<R, f32>(b)) {
                let c = cast_slice_mut::<R, f32>(c).expect("same element type");
                // SAFETY: the feature was detected at runtime; extents were checked above.
                unsafe { avx2::matmul_nt_f32(a, b, c, m, k, n, accumulate) };
                return;
            }
            if let (Some(a), Some(b)) = (cast_slice::<R, f64>(a), cast_slice::<R, f64>(b)) {
                let c = cast_slice_mut::<R, f64>(c).expect("same element type");
                // SAFETY: as above.
                unsafe { avx2::matmul_nt_f64(a, b, c, m, k, n, accumulate) };
                return;
            }
        }
    }
    matmul_nt_impl(a, b, c, m, k, n, accumulate)
}

/// Portable build of [`matmul_nt`], used to check the accelerated path.
pub fn matmul_nt_portable<R: Real>(
    a: &[R],
    b: &[R],
    c: &mut [R],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    matmul_nt_impl(a, b, c, m, k, n, accumulate)
}

/// Row-major transpose of a `rows×cols` matrix.
pub fn transpose<R: Real>(src: &[R], rows: usize, cols: usize) -> Vec<R> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![R::zero(); rows * cols];
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[j * k + p];
                }
            }
        }
        c
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (2, 17, 9), (5, 64, 7), (4, 33, 12)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = vec![0.0; m * n];
            matmul_nt(&a, &b, &mut c, m, k, n, false);
            for (x, y) in c.iter().zip(naive(&a, &b, m, k, n)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accelerated_path_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (7, 45, 13);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut fast = vec![0.5f32; m * n];
        let mut slow = fast.clone();
        matmul_nt(&a, &b, &mut fast, m, k, n, true);
        matmul_nt_portable(&a, &b, &mut slow, m, k, n, true);
        assert_eq!(
            fast.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            slow.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn accelerated_f64_path_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for &(m, k, n) in &[(9, 67, 11), (2, 8, 2), (1, 3, 5), (16, 128, 40)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut fast = vec![0.25f64; m * n];
            let mut slow = fast.clone();
            matmul_nt(&a, &b, &mut fast, m, k, n, true);
            matmul_nt_portable(&a, &b, &mut slow, m, k, n, true);
            assert_eq!(
                fast.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                slow.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn blocked_and_single_dots_agree_bitwise() {
        // Column 13 falls in the remainder path, columns 0..12 in the 2x4 tile.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (3, 29, 13);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = vec![0.0; m * n];
        matmul_nt(&a, &b, &mut c, m, k, n, false);
        for i in 0..m {
            for j in 0..n {
                let d = dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
                assert_eq!(c[i * n + j].to_bits(), d.to_bits());
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let src: Vec<f64> = (0..35).map(|v| v as f64).collect();
        let t = transpose(&src, 5, 7);
        assert_eq!(t[5], src[1]);
        assert_eq!(t[2 * 5 + 3], src[3 * 7 + 2]);
        assert_eq!(transpose(&t, 7, 5), src);
    }
}
