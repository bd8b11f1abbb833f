//! 2-D cross-correlation with zero padding and channel groups.
//!
//! Grouped convolutions with one input channel per group (depthwise) use a
//! direct kernel; everything else goes through im2col + GEMM.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec {
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
        }
    }

    /// Square kernel of odd size `k` with "same" padding `k / 2`.
    pub const fn same(k: usize, stride: usize, groups: usize) -> Self {
        Self::new(stride, k / 2, groups)
    }

    /// Validates operand shapes and returns the output shape.
    pub fn output_shape(&self, input: Shape, weight: Shape) -> Result<Shape> {
        let [n, cin, h, w] = input.dims();
        let [cout, cin_g, kh, kw] = weight.dims();
        let g = self.groups;
        if g == 0 {
            return Err(Error::invalid("conv2d groups must be positive"));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if cin % g != 0 {
            return Err(Error::invalid(format!(
                "conv2d groups {g} do not divide input channels {cin}"
            )));
        }
        if cout % g != 0 {
            return Err(Error::invalid(format!(
                "conv2d groups {g} do not divide output channels {cout}"
            )));
        }
        if cin_g * g != cin {
            return Err(Error::shape(format!(
                "conv2d weight {weight} expects {} input channels, input is {input}",
                cin_g * g
            )));
        }
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw || kh == 0 || kw == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {input}"
            )));
        }
        let ho = (h + 2 * ph - kh) / self.stride.0 + 1;
        let wo = (w + 2 * pw - kw) / self.stride.1 + 1;
        Ok(Shape::new(n, cout, ho, wo))
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    g: usize,
    cin_g: usize,
    cout_g: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    fn new(input: Shape, weight: Shape, out: Shape, spec: &ConvSpec) -> Self {
        let [n, cin, h, w] = input.dims();
        let [cout, cin_g, kh, kw] = weight.dims();
        Geometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: out.h(),
            wo: out.w(),
            g: spec.groups,
            cin_g,
            cout_g: cout / spec.groups,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1
    }

    /// Output rows `oy` for which input row `oy * sh + ky - ph` is in range.
    #[inline]
    fn valid_range(out: usize, inp: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
        // lo: smallest o with o*s + k >= p ; hi: largest o with o*s + k - p < inp, exclusive
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if inp + p > k {
            ((inp + p - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(out), hi)
    }
}

fn im2col<T: Element>(geo: &Geometry, x: &[T], col: &mut [T]) {
    // x: cin_g planes of h*w ; col: (cin_g*kh*kw) x (ho*wo)
    let owo = geo.ho * geo.wo;
    for c in 0..geo.cin_g {
        let plane = &x[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            let (ylo, yhi) = Geometry::valid_range(geo.ho, geo.h, ky, geo.sh, geo.ph);
            for kx in 0..geo.kw {
                let (xlo, xhi) = Geometry::valid_range(geo.wo, geo.w, kx, geo.sw, geo.pw);
                let row = ((c * geo.kh + ky) * geo.kw + kx) * owo;
                let dst = &mut col[row..row + owo];
                dst.fill(T::zero());
                if xlo >= xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * geo.sh + ky - geo.ph;
                    let src = &plane[iy * geo.w..(iy + 1) * geo.w];
                    let d = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                    if geo.sw == 1 {
                        let off = xlo + kx - geo.pw;
                        d[xlo..xhi].copy_from_slice(&src[off..off + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            d[ox] = src[ox * geo.sw + kx - geo.pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(geo: &Geometry, col: &[T], dx: &mut [T]) {
    let owo = geo.ho * geo.wo;
    for c in 0..geo.cin_g {
        let plane = &mut dx[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            let (ylo, yhi) = Geometry::valid_range(geo.ho, geo.h, ky, geo.sh, geo.ph);
            for kx in 0..geo.kw {
                let (xlo, xhi) = Geometry::valid_range(geo.wo, geo.w, kx, geo.sw, geo.pw);
                let row = ((c * geo.kh + ky) * geo.kw + kx) * owo;
                let srcrow = &col[row..row + owo];
                for oy in ylo..yhi {
                    let iy = oy * geo.sh + ky - geo.ph;
                    let d = &mut plane[iy * geo.w..(iy + 1) * geo.w];
                    let s = &srcrow[oy * geo.wo..(oy + 1) * geo.wo];
                    for ox in xlo..xhi {
                        d[ox * geo.sw + kx - geo.pw] += s[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(x.shape(), weight.shape())?;
    if let Some(b) = bias {
        if b.numel() != out_shape.c() {
            return Err(Error::shape(format!(
                "conv2d bias {} does not match {} output channels",
                b.shape(),
                out_shape.c()
            )));
        }
    }
    let geo = Geometry::new(x.shape(), weight.shape(), out_shape, spec);
    let mut out = Tensor::zeros(out_shape);
    let owo = geo.ho * geo.wo;
    let ckk = geo.cin_g * geo.kh * geo.kw;
    let xd = x.data();
    let wd = weight.data();
    let od = out.data_mut();

    if geo.is_depthwise() {
        depthwise_forward(&geo, xd, wd, od);
    } else {
        let mut col = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); ckk * owo]
        };
        for b in 0..geo.n {
            for g in 0..geo.g {
                let xin = &xd[(b * geo.cin + g * geo.cin_g) * geo.h * geo.w..];
                let wg = &wd[g * geo.cout_g * ckk..(g + 1) * geo.cout_g * ckk];
                let obase = (b * geo.cout + g * geo.cout_g) * owo;
                let oslice = &mut od[obase..obase + geo.cout_g * owo];
                if geo.is_pointwise() {
                    gemm_nn(geo.cout_g, owo, ckk, wg, &xin[..ckk * owo], oslice);
                } else {
                    im2col(&geo, xin, &mut col);
                    gemm_nn(geo.cout_g, owo, ckk, wg, &col, oslice);
                }
            }
        }
    }
    if let Some(bias) = bias {
        let bd = bias.data();
        for b in 0..geo.n {
            for (oc, &bv) in bd.iter().enumerate() {
                let base = (b * geo.cout + oc) * owo;
                for v in &mut od[base..base + owo] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

fn depthwise_forward<T: Element>(geo: &Geometry, xd: &[T], wd: &[T], od: &mut [T]) {
    let kk = geo.kh * geo.kw;
    for b in 0..geo.n {
        for oc in 0..geo.cout {
            let ic = oc / geo.cout_g;
            let plane = &xd[(b * geo.cin + ic) * geo.h * geo.w..][..geo.h * geo.w];
            let wk = &wd[oc * kk..(oc + 1) * kk];
            let out = &mut od[(b * geo.cout + oc) * geo.ho * geo.wo..][..geo.ho * geo.wo];
            for ky in 0..geo.kh {
                let (ylo, yhi) = Geometry::valid_range(geo.ho, geo.h, ky, geo.sh, geo.ph);
                for kx in 0..geo.kw {
                    let (xlo, xhi) = Geometry::valid_range(geo.wo, geo.w, kx, geo.sw, geo.pw);
                    if xlo >= xhi {
                        continue;
                    }
                    let wv = wk[ky * geo.kw + kx];
                    for oy in ylo..yhi {
                        let iy = oy * geo.sh + ky - geo.ph;
                        let src = &plane[iy * geo.w..(iy + 1) * geo.w];
                        let dst = &mut out[oy * geo.wo..(oy + 1) * geo.wo];
                        if geo.sw == 1 {
                            let off = kx + xlo - geo.pw;
                            for (d, &s) in dst[xlo..xhi].iter_mut().zip(&src[off..]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in xlo..xhi {
                                dst[ox] += wv * src[ox * geo.sw + kx - geo.pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    geo: &Geometry,
    xd: &[T],
    wd: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let kk = geo.kh * geo.kw;
    for b in 0..geo.n {
        for oc in 0..geo.cout {
            let ic = oc / geo.cout_g;
            let pbase = (b * geo.cin + ic) * geo.h * geo.w;
            let plane = &xd[pbase..pbase + geo.h * geo.w];
            let g = &dy[(b * geo.cout + oc) * geo.ho * geo.wo..][..geo.ho * geo.wo];
            for ky in 0..geo.kh {
                let (ylo, yhi) = Geometry::valid_range(geo.ho, geo.h, ky, geo.sh, geo.ph);
                for kx in 0..geo.kw {
                    let (xlo, xhi) = Geometry::valid_range(geo.wo, geo.w, kx, geo.sw, geo.pw);
                    let widx = oc * kk + ky * geo.kw + kx;
                    let wv = wd[widx];
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = oy * geo.sh + ky - geo.ph;
                        let grow = &g[oy * geo.wo..(oy + 1) * geo.wo];
                        let row = iy * geo.w;
                        for (ox, &gv) in grow.iter().enumerate().take(xhi).skip(xlo) {
                            acc += gv * plane[row + ox * geo.sw + kx - geo.pw];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[pbase + row..pbase + row + geo.w];
                            for ox in xlo..xhi {
                                drow[ox * geo.sw + kx - geo.pw] += wv * grow[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let geo = Geometry::new(x.shape(), weight.shape(), dy.shape(), spec);
    let owo = geo.ho * geo.wo;
    let ckk = geo.cin_g * geo.kh * geo.kw;
    let (need_x, need_w, need_b) = need;
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_w.then(|| Tensor::zeros(weight.shape()));
    let xd = x.data();
    let wd = weight.data();
    let gd = dy.data();

    if geo.is_depthwise() {
        depthwise_backward(
            &geo,
            xd,
            wd,
            gd,
            dx.as_mut().map(|t| t.data_mut()),
            dw.as_mut().map(|t| t.data_mut()),
        );
    } else if need_x || need_w {
        let pointwise = geo.is_pointwise();
        let mut col = vec![T::zero(); if pointwise { 0 } else { ckk * owo }];
        let mut dcol = vec![T::zero(); if pointwise || !need_x { 0 } else { ckk * owo }];
        for b in 0..geo.n {
            for g in 0..geo.g {
                let xoff = (b * geo.cin + g * geo.cin_g) * geo.h * geo.w;
                let gslice = &gd[(b * geo.cout + g * geo.cout_g) * owo..][..geo.cout_g * owo];
                let wg = &wd[g * geo.cout_g * ckk..(g + 1) * geo.cout_g * ckk];
                if let Some(dw) = dw.as_mut() {
                    let dwg = &mut dw.data_mut()[g * geo.cout_g * ckk..(g + 1) * geo.cout_g * ckk];
                    if pointwise {
                        gemm_nt(geo.cout_g, ckk, owo, gslice, &xd[xoff..xoff + ckk * owo], dwg);
                    } else {
                        im2col(&geo, &xd[xoff..], &mut col);
                        gemm_nt(geo.cout_g, ckk, owo, gslice, &col, dwg);
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let dxs = &mut dx.data_mut()[xoff..xoff + geo.cin_g * geo.h * geo.w];
                    if pointwise {
                        gemm_tn(ckk, owo, geo.cout_g, wg, gslice, dxs);
                    } else {
                        dcol.fill(T::zero());
                        gemm_tn(ckk, owo, geo.cout_g, wg, gslice, &mut dcol);
                        col2im(&geo, &dcol, dxs);
                    }
                }
            }
        }
    }

    let db = need_b.then(|| {
        let mut db = Tensor::zeros(Shape::vector(geo.cout));
        let dbd = db.data_mut();
        for b in 0..geo.n {
            for (oc, acc) in dbd.iter_mut().enumerate() {
                *acc += gd[(b * geo.cout + oc) * owo..][..owo].iter().copied().sum::<T>();
            }
        }
        db
    });

    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}
