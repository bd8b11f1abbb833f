use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Softmax over the last (width) axis, with max subtraction.
pub fn softmax_rows<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    let w = x.shape().w();
    let mut out = x.clone();
    if w == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(w) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = T::one() / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// `dx = y * (dy - sum(dy * y))` row by row.
pub fn softmax_rows_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let w = y.shape().w();
    let mut dx = Tensor::zeros(y.shape());
    if w == 0 {
        return dx;
    }
    for ((d, yr), gr) in dx
        .data_mut()
        .chunks_mut(w)
        .zip(y.data().chunks(w))
        .zip(dy.data().chunks(w))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((dv, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
            *dv = yv * (gv - dot);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures() {
        let x = Tensor::<f64>::from_vec([1, 1, 3, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        let d = y.data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((d[3] - 1.0).abs() < 1e-6 && d[4] < 1e-6);
        let want = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (g, w) in d[6..].iter().zip(want) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn two_zeros_is_half() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax_rows(&x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn nan_rejected() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(softmax_rows(&x).is_err());
    }
}
