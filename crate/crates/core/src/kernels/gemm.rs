//! Row-major general matrix multiply kernels. All variants accumulate into `c`.

use crate::tensor::Element;

/// `c[m x n] += a[m x k] * b[k x n]`
pub fn gemm_nn<T: Element>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x n] += a[k x m]^T * b[k x n]`
pub fn gemm_tn<T: Element>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        let acol = &a[p * m..(p + 1) * m];
        for (i, &av) in acol.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[n x k]^T`
pub fn gemm_nt<T: Element>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    let bt = transpose(n, k, b);
    gemm_nn(m, n, k, a, &bt, c);
}

/// Transpose of a row-major `rows x cols` matrix.
pub fn transpose<T: Element>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for (cidx, &v) in src[r * cols..(r + 1) * cols].iter().enumerate() {
            out[cidx * rows + r] = v;
        }
    }
    out
}
