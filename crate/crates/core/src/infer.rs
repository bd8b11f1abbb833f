//! Whole-image inference on arbitrary extents.

use crate::error::{Error, Result};
use crate::io::{GrayImage, RgbImage};
use crate::model::CanModel;
use crate::tensor::{Element, Shape, Tensor};

/// Extents the network accepts are multiples of this.
pub const SIZE_MULTIPLE: usize = 16;

/// Mirror index without edge repetition (`... 2 1 0 1 2 ...`), folding as
/// often as needed for pads wider than the image.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    (if r < n as isize { r } else { period - r }) as usize
}

/// Pads `[N, C, H, W]` on the bottom and right by reflection up to the next
/// multiple of `multiple` in each extent, and to at least `min_extent`.
pub fn reflect_pad<T: Element>(x: &Tensor<T>, multiple: usize, min_extent: usize) -> Result<Tensor<T>> {
    if multiple == 0 {
        return Err(Error::invalid("pad multiple must be positive"));
    }
    let [n, c, h, w] = x.shape().dims();
    if h == 0 || w == 0 {
        return Err(Error::shape(format!("cannot pad an empty {h}x{w} image")));
    }
    let up = |v: usize| v.max(min_extent).div_ceil(multiple) * multiple;
    let (ph, pw) = (up(h), up(w));
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in x.data().chunks_exact(h * w) {
        for i in 0..ph {
            let row = &plane[mirror(i as isize, h) * w..][..w];
            out.extend((0..pw).map(|j| row[mirror(j as isize, w)]));
        }
    }
    Tensor::from_vec(Shape::new(n, c, ph, pw), out)
}

/// Per-pixel labels for `img`: reflect-padded to a multiple of
/// [`SIZE_MULTIPLE`] (and large enough for the attention pyramid), predicted
/// in inference mode, cropped back.
pub fn segment(model: &CanModel, img: &RgbImage) -> Result<GrayImage> {
    let min_extent = SIZE_MULTIPLE * model.config.spp.max_scale();
    let x = reflect_pad(&img.to_tensor(), SIZE_MULTIPLE, min_extent)?;
    let pw = x.shape().w();
    let labels = model.predict(&x)?.swap_remove(0);
    let data = (0..img.height)
        .flat_map(|i| labels[i * pw..i * pw + img.width].iter().copied())
        .collect();
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn mirror_fixture() {
        let got: Vec<usize> = (-3..9).map(|i| mirror(i, 4)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(mirror(5, 1), 0);
    }

    #[test]
    fn pad_keeps_the_original_and_reflects() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = reflect_pad(&x, 4, 0).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 1, 4, 4));
        #[rustfmt::skip]
        let want = [
            1.0, 2.0, 3.0, 2.0,
            4.0, 5.0, 6.0, 5.0,
            1.0, 2.0, 3.0, 2.0,
            4.0, 5.0, 6.0, 5.0,
        ];
        assert_eq!(p.data(), want);
        assert_eq!(reflect_pad(&p, 4, 0).unwrap(), p);
        assert_eq!(reflect_pad(&x, 4, 5).unwrap().shape(), Shape::new(1, 1, 8, 8));
    }

    #[test]
    fn segment_crops_back() {
        let model = CanModel::new(ModelConfig::toy(), 0).unwrap();
        for (w, h) in [(64, 64), (90, 70), (5, 3)] {
            let img = RgbImage::new(w, h, (0..3 * w * h).map(|i| (i * 7 % 256) as u8).collect()).unwrap();
            let out = segment(&model, &img).unwrap();
            assert_eq!((out.width, out.height, out.data.len()), (w, h, w * h));
            assert!(out.data.iter().all(|&l| l < 4));
        }
    }
}
