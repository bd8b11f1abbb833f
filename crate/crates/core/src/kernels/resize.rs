use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Source taps for one output coordinate: `(i0, i1, frac)` with the value
/// interpolated as `(1 - frac) * in[i0] + frac * in[i1]`.
#[inline]
pub fn bilinear_taps(o: usize, in_len: usize, out_len: usize, align_corners: bool) -> (usize, usize, f64) {
    let src = if align_corners {
        if out_len > 1 {
            o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
        } else {
            0.0
        }
    } else {
        let scale = in_len as f64 / out_len as f64;
        ((o as f64 + 0.5) * scale - 0.5).max(0.0)
    };
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

fn taps(in_len: usize, out_len: usize, align: bool) -> Vec<(usize, usize, f64)> {
    (0..out_len).map(|o| bilinear_taps(o, in_len, out_len, align)).collect()
}

pub fn bilinear_resize<T: Element>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    align_corners: bool,
) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize output extent must be positive"));
    }
    let [n, c, h, w] = x.shape().dims();
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear_resize input has an empty plane"));
    }
    let ty = taps(h, out_h, align_corners);
    let tx = taps(w, out_w, align_corners);
    let mut out = Tensor::zeros(Shape::new(n, c, out_h, out_w));
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let plane = &xd[nc * h * w..(nc + 1) * h * w];
        let dst = &mut od[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[oy * out_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize_backward<T: Element>(input_shape: Shape, dy: &Tensor<T>, align_corners: bool) -> Tensor<T> {
    let [n, c, h, w] = input_shape.dims();
    let (out_h, out_w) = (dy.shape().h(), dy.shape().w());
    let ty = taps(h, out_h, align_corners);
    let tx = taps(w, out_w, align_corners);
    let mut dx = Tensor::zeros(input_shape);
    let gd = dy.data();
    let dd = dx.data_mut();
    for nc in 0..n * c {
        let plane = &mut dd[nc * h * w..(nc + 1) * h * w];
        let g = &gd[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let v = g[oy * out_w + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                plane[y0 * w + x0] += top * (T::one() - fx);
                plane[y0 * w + x1] += top * fx;
                plane[y1 * w + x0] += bot * (T::one() - fx);
                plane[y1 * w + x1] += bot * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_extents() {
        let x = Tensor::<f32>::from_vec([1, 2, 2, 3], (0..12).map(|v| v as f32 * 0.5).collect()).unwrap();
        let y = bilinear_resize(&x, 2, 3, false).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn constant_map_stays_constant() {
        let x = Tensor::<f32>::full([1, 1, 3, 5], 2.5);
        let y = bilinear_resize(&x, 12, 20, false).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }
}
