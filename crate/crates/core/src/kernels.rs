//! Dense matrix kernels over row-major slices. All kernels accumulate into `out`.

use alloc::vec;

const MR: usize = 4;
const NR: usize = 8;

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

/// `out[rows×n] += A · b[red×n]` where `A(i, p) = a[i * ars + p * acs]`.
///
/// Full `MR×NR` tiles accumulate in registers; the ragged edges use plain dots.
#[allow(clippy::too_many_arguments)]
fn blocked(a: &[f32], ars: usize, acs: usize, b: &[f32], out: &mut [f32], rows: usize, red: usize, n: usize) {
    let full_rows = rows - rows % MR;
    let full_cols = n - n % NR;
    for i0 in (0..full_rows).step_by(MR) {
        for j0 in (0..full_cols).step_by(NR) {
            let mut acc = [[0.0f32; NR]; MR];
            for p in 0..red {
                let bp: &[f32; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("tile width");
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * ars + p * acs];
                    for c in 0..NR {
                        acc_r[c] += av * bp[c];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let o = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for c in 0..NR {
                    o[c] += acc_r[c];
                }
            }
        }
    }
    let edge = |out: &mut [f32], i: usize, j: usize| {
        let mut s = 0.0;
        for p in 0..red {
            s += a[i * ars + p * acs] * b[p * n + j];
        }
        out[i * n + j] += s;
    };
    for i in 0..full_rows {
        for j in full_cols..n {
            edge(out, i, j);
        }
    }
    for i in full_rows..rows {
        for j in 0..n {
            edge(out, i, j);
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    blocked(a, k, 1, b, out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if m < MR || n < NR {
        for i in 0..m {
            let ai = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] += dot(ai, &b[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    blocked(a, k, 1, &bt, out, m, k, n);
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
///
/// Row-wise updates keep `out` hot in cache while `b` streams through once.
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, bi, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> alloc::vec::Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f32], r: usize, c: usize) -> alloc::vec::Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn all_variants_agree_with_naive_product() {
        for (m, k, n) in [(5, 11, 3), (9, 7, 17), (8, 16, 8), (1, 1, 1)] {
        let a: alloc::vec::Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: alloc::vec::Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut nn = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut nn, m, k, n);
        let mut nt = vec![0.0; m * n];
        gemm_nt(&a, &transpose(&b, k, n), &mut nt, m, k, n);
        let mut tn = vec![0.0; m * n];
        gemm_tn(&transpose(&a, m, k), &b, &mut tn, k, m, n);

        for i in 0..m * n {
            assert!((nn[i] - want[i]).abs() < 1e-5);
            assert!((nt[i] - want[i]).abs() < 1e-5);
            assert!((tn[i] - want[i]).abs() < 1e-5);
        }
        }
    }
}
