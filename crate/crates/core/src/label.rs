//! Integer class maps.

use crate::error::{Error, Result};

/// Per-pixel class indices for a batch, `n x h x w` in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(format!(
                "label map {n}x{h}x{w} needs {} entries, got {}",
                n * h * w,
                data.len()
            )));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        LabelMap {
            n,
            h,
            w,
            data: vec![value; n * h * w],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, b: usize, i: usize, j: usize) -> u8 {
        self.data[(b * self.h + i) * self.w + j]
    }

    pub fn item(&self, b: usize) -> &[u8] {
        let plane = self.h * self.w;
        &self.data[b * plane..(b + 1) * plane]
    }

    /// Joins single-image maps of equal extent.
    pub fn stack(items: &[LabelMap]) -> Result<LabelMap> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero label maps"))?;
        let mut data = Vec::with_capacity(items.len() * first.h * first.w);
        let mut n = 0;
        for m in items {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::shape("label maps to stack differ in extent"));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        LabelMap::new(n, first.h, first.w, data)
    }

    /// Nearest-neighbour resampling that reads the source pixel containing
    /// each output pixel's center.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> LabelMap {
        let rows: Vec<usize> = (0..out_h).map(|o| center_source(o, self.h, out_h)).collect();
        let cols: Vec<usize> = (0..out_w).map(|o| center_source(o, self.w, out_w)).collect();
        let mut data = Vec::with_capacity(self.n * out_h * out_w);
        for b in 0..self.n {
            for &i in &rows {
                for &j in &cols {
                    data.push(self.at(b, i, j));
                }
            }
        }
        LabelMap {
            n: self.n,
            h: out_h,
            w: out_w,
            data,
        }
    }
}

fn center_source(o: usize, in_len: usize, out_len: usize) -> usize {
    (((2 * o + 1) * in_len) / (2 * out_len)).min(in_len - 1)
}
