use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Half-open input range covered by adaptive bin `i` of `out` over `len`:
/// `[floor(i * len / out), ceil((i + 1) * len / out))`.
#[inline]
pub fn adaptive_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Adaptive max pooling. Returns the pooled tensor and, for every output
/// element, the flat index of the selected input element.
pub fn adaptive_max_pool2d<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.shape().dims();
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("adaptive_max_pool2d output extent must be positive"));
    }
    if out_h > h || out_w > w {
        return Err(Error::shape(format!(
            "adaptive_max_pool2d output {out_h}x{out_w} exceeds input {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(Shape::new(n, c, out_h, out_w));
    let mut arg = vec![0usize; n * c * out_h * out_w];
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..out_h {
            let (y0, y1) = adaptive_bin(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_bin(ox, w, out_w);
                let mut best = base + y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let idx = base + iy * w + ix;
                        // first maximum wins on ties; NaN never replaces
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                let o = (nc * out_h + oy) * out_w + ox;
                od[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

pub fn adaptive_max_pool2d_backward<T: Element>(input_shape: Shape, argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    dx
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().dims();
    let plane = h * w;
    let inv = T::one() / T::of(plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(Shape::new(n, c, 1, 1), data).expect("pooled length")
}

pub fn global_avg_pool_backward<T: Element>(input_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let plane = input_shape.plane();
    let inv = T::one() / T::of(plane as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        chunk.fill(g * inv);
    }
    dx
}
