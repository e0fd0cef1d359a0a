//! Dense matrix kernels. Every output row is produced by a single thread with a
//! fixed summation order, so results are bit-identical regardless of how rayon
//! schedules the rows.

use rayon::prelude::*;

use crate::scalar::Scalar;

const PAR_THRESHOLD: usize = 1 << 15;

fn for_each_row<T: Scalar>(out: &mut [T], width: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `out[m, n] = a[m, k] . b[k, n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, m * k * n, |i, row| {
        row.iter_mut().for_each(|v| *v = T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// `out[m, n] = a[m, k] . b[n, k]^T`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for_each_row(out, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
        }
    });
}

/// `out[k, n] += a[m, k]^T . c[m, n]`
pub fn matmul_tn_acc<T: Scalar>(a: &[T], c: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for_each_row(out, n, m * k * n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let c_row = &c[i * n..(i + 1) * n];
            for (o, &cv) in row.iter_mut().zip(c_row) {
                *o += av * cv;
            }
        }
    });
}

/// Swaps the last two axes of a stack of `[rows, cols]` matrices.
pub fn transpose_last2<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (mat_in, mat_out) in src.chunks(rows * cols).zip(out.chunks_mut(rows * cols)) {
        for r in 0..rows {
            for c in 0..cols {
                mat_out[c * rows + r] = mat_in[r * cols + c];
            }
        }
    }
    out
}
