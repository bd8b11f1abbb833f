//! Forward and backward kernels over plain tensors. These carry no graph
//! bookkeeping; [`crate::autograd`] wires them together.

pub mod act;
pub mod conv;
pub mod gemm;
pub mod norm;
pub mod pool;
pub mod resize;
pub mod softmax;

pub use act::Activation;
pub use conv::ConvSpec;
pub use norm::BnSpec;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Output shape of a batched matrix product: every `(n, c)` slice of `a` is a
/// `P x Q` matrix, of `b` a `Q x R` matrix.
pub fn matmul_shape(a: Shape, b: Shape) -> Result<Shape> {
    let [an, ac, p, q] = a.dims();
    let [bn, bc, q2, r] = b.dims();
    if (an, ac) != (bn, bc) {
        return Err(Error::shape(format!("matmul batch extents differ: {a} vs {b}")));
    }
    if q != q2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {a} (inner {q}) vs {b} (inner {q2})"
        )));
    }
    Ok(Shape::new(an, ac, p, r))
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = matmul_shape(a.shape(), b.shape())?;
    let [n, c, p, q] = a.shape().dims();
    let r = b.shape().w();
    let mut out = Tensor::zeros(out_shape);
    let od = out.data_mut();
    for i in 0..n * c {
        gemm::gemm_nn(
            p,
            r,
            q,
            &a.data()[i * p * q..(i + 1) * p * q],
            &b.data()[i * q * r..(i + 1) * q * r],
            &mut od[i * p * r..(i + 1) * p * r],
        );
    }
    Ok(out)
}

/// Returns `(da, db)` for `c = a * b`.
pub fn matmul_backward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, dc: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, p, q] = a.shape().dims();
    let r = b.shape().w();
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for i in 0..n * c {
        let ai = &a.data()[i * p * q..(i + 1) * p * q];
        let bi = &b.data()[i * q * r..(i + 1) * q * r];
        let gi = &dc.data()[i * p * r..(i + 1) * p * r];
        // da = dc * b^T ; db = a^T * dc
        gemm::gemm_nt(p, q, r, gi, bi, &mut da.data_mut()[i * p * q..(i + 1) * p * q]);
        gemm::gemm_tn(q, r, p, ai, gi, &mut db.data_mut()[i * q * r..(i + 1) * q * r]);
    }
    (da, db)
}

/// Swaps the H and W axes.
pub fn transpose_hw<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().dims();
    let mut data = Vec::with_capacity(x.numel());
    for plane in x.data().chunks(h * w) {
        data.extend(gemm::transpose(h, w, plane));
    }
    Tensor::from_vec(Shape::new(n, c, w, h), data).expect("transpose length")
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?
        .shape();
    let [n, _, h, w] = first.dims();
    let mut c_total = 0;
    for t in parts {
        let s = t.shape();
        if (s.n(), s.h(), s.w()) != (n, h, w) {
            return Err(Error::shape(format!("channel concat extents differ: {first} vs {s}")));
        }
        c_total += s.c();
    }
    let mut data = Vec::with_capacity(n * c_total * h * w);
    for b in 0..n {
        for t in parts {
            let len = t.shape().c() * h * w;
            data.extend_from_slice(&t.data()[b * len..(b + 1) * len]);
        }
    }
    Tensor::from_vec(Shape::new(n, c_total, h, w), data)
}

/// Concatenates along the width axis; all parts must share N, C and H.
pub fn concat_width<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?
        .shape();
    let [n, c, h, _] = first.dims();
    let mut w_total = 0;
    for t in parts {
        let s = t.shape();
        if (s.n(), s.c(), s.h()) != (n, c, h) {
            return Err(Error::shape(format!("width concat extents differ: {first} vs {s}")));
        }
        w_total += s.w();
    }
    let mut data = Vec::with_capacity(n * c * h * w_total);
    for row in 0..n * c * h {
        for t in parts {
            let w = t.shape().w();
            data.extend_from_slice(&t.data()[row * w..(row + 1) * w]);
        }
    }
    Tensor::from_vec(Shape::new(n, c, h, w_total), data)
}

/// Gathers channels by index (repetition allowed).
pub fn select_channels<T: Element>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().dims();
    if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
        return Err(Error::shape(format!(
            "channel index {bad} out of range for {}",
            x.shape()
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * idx.len() * plane);
    for b in 0..n {
        for &i in idx {
            let base = (b * c + i) * plane;
            data.extend_from_slice(&x.data()[base..base + plane]);
        }
    }
    Tensor::from_vec(Shape::new(n, idx.len(), h, w), data)
}
