//! Binary PPM (P6) and PGM (P5) images and label color rendering.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// 8-bit interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// 8-bit single-channel raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[1, 3, H, W]` with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), data).expect("extent matches")
    }

    /// Quantizes the first image of a `[N, 3, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.c() != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {s}")));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                let v = t.data()[c * plane + p].clamp(0.0, 1.0);
                data.push((v * 255.0).round() as u8);
            }
        }
        RgbImage::new(s.w(), s.h(), data)
    }
}

fn header_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

/// Header token scanner that skips whitespace and `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(header_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| header_err(start, format!("{what} out of range")))
    }
}

/// Parses a P5/P6 header; returns (width, height, payload offset).
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(header_err(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    h.skip_space();
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(header_err(maxval_at, format!("maxval {maxval} unsupported, need 255")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((width, height, h.pos + 1)),
        _ => Err(header_err(h.pos, "expected single whitespace after maxval")),
    }
}

fn payload(bytes: &[u8], offset: usize, needed: usize) -> Result<&[u8]> {
    let available = bytes.len() - offset;
    if available < needed {
        return Err(Error::Truncated {
            offset,
            needed,
            available,
        });
    }
    Ok(&bytes[offset..offset + needed])
}

pub fn read_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, off) = parse_header(bytes, b"P6")?;
    let data = payload(bytes, off, 3 * w * h)?.to_vec();
    RgbImage::new(w, h, data)
}

pub fn write_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (width, height, off) = parse_header(bytes, b"P5")?;
    let data = payload(bytes, off, width * height)?.to_vec();
    Ok(GrayImage { width, height, data })
}

/// Class indices written verbatim as gray levels.
pub fn write_label_pgm(labels: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    if labels.len() != width * height {
        return Err(Error::shape(format!(
            "{width}x{height} label map needs {} entries, got {}",
            width * height,
            labels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(labels);
    Ok(out)
}

/// Street-scene palette for up to 19 classes (road, sidewalk, building,
/// wall, fence, pole, traffic light, traffic sign, vegetation, terrain, sky,
/// person, rider, car, truck, bus, train, motorcycle, bicycle).
pub const STREET_PALETTE: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

/// Color of pixels carrying the ignore label.
pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

/// The street palette when `k <= 19`, otherwise colors from spreading the
/// bits of the class index over the three channels (distinct for `k < 512`).
pub fn palette(k: usize) -> Vec<[u8; 3]> {
    if k <= STREET_PALETTE.len() {
        return STREET_PALETTE[..k].to_vec();
    }
    (0..k)
        .map(|i| {
            let mut c = [0u8; 3];
            let mut id = i + 1;
            let mut bit: i32 = 7;
            while id > 0 && bit >= 0 {
                for (ch, v) in c.iter_mut().enumerate() {
                    *v |= (((id >> ch) & 1) as u8) << bit;
                }
                id >>= 3;
                bit -= 1;
            }
            c
        })
        .collect()
}

/// Renders class indices; indices outside the palette get [`IGNORE_COLOR`].
pub fn color_map(labels: &[u8], width: usize, height: usize, palette: &[[u8; 3]]) -> Result<RgbImage> {
    if labels.len() != width * height {
        return Err(Error::shape(format!(
            "{width}x{height} label map needs {} entries, got {}",
            width * height,
            labels.len()
        )));
    }
    let data = labels
        .iter()
        .flat_map(|&l| *palette.get(l as usize).unwrap_or(&IGNORE_COLOR))
        .collect();
    RgbImage::new(width, height, data)
}
