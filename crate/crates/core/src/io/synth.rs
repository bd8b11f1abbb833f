//! Seeded synthetic segmentation data: colored shapes over gray noise.
//!
//! Class 0 is the background. Shape class `c` in `1..K` is drawn as a
//! rectangle, disk or triangle (cycling with `c`) in a saturated color whose
//! hue is `(c - 1) / (K - 1)` of the color wheel, so [`decode_pixel`] can read
//! the class back from the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::{Shape, Tensor};

/// Scale jitter choices of the augmentation pass.
pub const SCALES: [f64; 5] = [0.75, 1.0, 1.5, 1.75, 2.0];

const GRAY_NOISE: f32 = 0.03;
const SHAPE_NOISE: f32 = 0.02;
const COLOR_JITTER: f32 = 0.1;
/// Chroma (max minus min channel) separating background from shapes.
const CHROMA_THRESHOLD: f32 = 0.33;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

impl ShapeKind {
    pub fn for_class(class: usize) -> ShapeKind {
        match (class - 1) % 3 {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Disk,
            _ => ShapeKind::Triangle,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub augment: bool,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config(format!(
                "dataset classes must be in 2..=255, got {}",
                self.classes
            )));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "dataset extent {}x{} must be positive multiples of 16",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `1 x H x W` class indices.
    pub label: LabelMap,
}

/// Shape class color before noise; `value` and `saturation` vary per shape.
fn class_color(class: usize, classes: usize, saturation: f32, value: f32) -> [f32; 3] {
    let hue = (class - 1) as f32 / (classes - 1) as f32 * 6.0;
    let sector = hue.floor() as usize % 6;
    let f = hue - hue.floor();
    let (p, q, t) = (
        value * (1.0 - saturation),
        value * (1.0 - saturation * f),
        value * (1.0 - saturation * (1.0 - f)),
    );
    match sector {
        0 => [value, t, p],
        1 => [q, value, p],
        2 => [p, value, t],
        3 => [p, q, value],
        4 => [t, p, value],
        _ => [value, p, q],
    }
}

/// Rule-based inverse of the renderer: low chroma is background, otherwise
/// the class whose hue is nearest on the color wheel.
pub fn decode_pixel(rgb: [f32; 3], classes: usize) -> u8 {
    let max = rgb.iter().copied().fold(f32::MIN, f32::max);
    let min = rgb.iter().copied().fold(f32::MAX, f32::min);
    let chroma = max - min;
    if chroma < CHROMA_THRESHOLD {
        return 0;
    }
    let [r, g, b] = rgb;
    let h = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    } / 6.0;
    let n = (classes - 1) as f32;
    let mut best = (f32::MAX, 1);
    for c in 1..classes {
        let d = (h - (c - 1) as f32 / n).abs();
        let d = d.min(1.0 - d);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1 as u8
}

/// Decodes every pixel of a `[1, 3, H, W]` image.
pub fn decode_image(image: &Tensor<f32>, classes: usize) -> Vec<u8> {
    let plane = image.shape().plane();
    let d = image.data();
    (0..plane)
        .map(|p| decode_pixel([d[p], d[plane + p], d[2 * plane + p]], classes))
        .collect()
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f32; 3]>,
    label: Vec<u8>,
}

impl Canvas {
    fn background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Canvas {
        let gray: f32 = rng.random_range(0.3..0.6);
        let rgb = (0..h * w)
            .map(|_| std::array::from_fn(|_| gray + rng.random_range(-GRAY_NOISE..GRAY_NOISE)))
            .collect();
        Canvas {
            h,
            w,
            rgb,
            label: vec![0; h * w],
        }
    }

    /// Paints one shape over whatever is below it.
    fn paint(&mut self, class: usize, classes: usize, rng: &mut ChaCha8Rng) {
        let (h, w) = (self.h as f32, self.w as f32);
        let base = class_color(
            class,
            classes,
            rng.random_range(0.85..1.0),
            rng.random_range(0.75..0.95),
        );
        let cy = rng.random_range(0.0..h);
        let cx = rng.random_range(0.0..w);
        let extent = h.min(w);
        let kind = ShapeKind::for_class(class);
        let inside: Box<dyn Fn(f32, f32) -> bool> = match kind {
            ShapeKind::Rectangle => {
                let hy = rng.random_range(0.12..0.35) * extent;
                let hx = rng.random_range(0.12..0.35) * extent;
                Box::new(move |y, x| (y - cy).abs() <= hy && (x - cx).abs() <= hx)
            }
            ShapeKind::Disk => {
                let r = rng.random_range(0.15..0.35) * extent;
                Box::new(move |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
            }
            ShapeKind::Triangle => {
                let r = rng.random_range(0.2..0.45) * extent;
                let theta: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                let v: [(f32, f32); 3] = std::array::from_fn(|i| {
                    let a = theta + i as f32 * std::f32::consts::TAU / 3.0;
                    (cy + r * a.sin(), cx + r * a.cos())
                });
                Box::new(move |y, x| {
                    let edge = |(ay, ax): (f32, f32), (by, bx): (f32, f32)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                    let s = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                    s.iter().all(|&e| e >= 0.0) || s.iter().all(|&e| e <= 0.0)
                })
            }
        };
        for i in 0..self.h {
            for j in 0..self.w {
                if inside(i as f32 + 0.5, j as f32 + 0.5) {
                    let p = i * self.w + j;
                    self.rgb[p] = std::array::from_fn(|c| base[c] + rng.random_range(-SHAPE_NOISE..SHAPE_NOISE));
                    self.label[p] = class as u8;
                }
            }
        }
    }

    fn flip(&mut self) {
        for i in 0..self.h {
            self.rgb[i * self.w..(i + 1) * self.w].reverse();
            self.label[i * self.w..(i + 1) * self.w].reverse();
        }
    }

    /// Nearest-neighbour rescale by `s`, then a random crop (`s > 1`) or a
    /// random placement on fresh background (`s < 1`) back to the original extent.
    fn rescale(&mut self, s: f64, rng: &mut ChaCha8Rng) {
        if s == 1.0 {
            return;
        }
        let (h, w) = (self.h, self.w);
        let (sh, sw) = (((h as f64) * s).round() as usize, ((w as f64) * s).round() as usize);
        let src = |o: usize, n: usize, m: usize| (((2 * o + 1) * n) / (2 * m)).min(n - 1);
        let mut out = Canvas::background(h, w, rng);
        let (oy, ox) = if s > 1.0 {
            (
                rng.random_range(0..=sh - h) as isize,
                rng.random_range(0..=sw - w) as isize,
            )
        } else {
            (
                -(rng.random_range(0..=h - sh) as isize),
                -(rng.random_range(0..=w - sw) as isize),
            )
        };
        for i in 0..h {
            let y = i as isize + oy;
            if y < 0 || y as usize >= sh {
                continue;
            }
            let si = src(y as usize, h, sh);
            for j in 0..w {
                let x = j as isize + ox;
                if x < 0 || x as usize >= sw {
                    continue;
                }
                let sj = src(x as usize, w, sw);
                out.rgb[i * w + j] = self.rgb[si * w + sj];
                out.label[i * w + j] = self.label[si * w + sj];
            }
        }
        *self = out;
    }

    fn jitter(&mut self, rng: &mut ChaCha8Rng) {
        let shift: [f32; 3] = std::array::from_fn(|_| rng.random_range(-COLOR_JITTER..=COLOR_JITTER));
        for px in &mut self.rgb {
            for c in 0..3 {
                px[c] += shift[c];
            }
        }
    }

    fn into_sample(self) -> SynthSample {
        let plane = self.h * self.w;
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in self.rgb.iter().enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c].clamp(0.0, 1.0);
            }
        }
        SynthSample {
            image: Tensor::from_vec(Shape::new(1, 3, self.h, self.w), data).expect("extent matches"),
            label: LabelMap::new(1, self.h, self.w, self.label).expect("extent matches"),
        }
    }
}

/// Sample `index` of the stream; a pure function of `(cfg, index)`.
pub fn synth_sample(cfg: &SynthConfig, index: u64) -> Result<SynthSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let mut canvas = Canvas::background(cfg.height, cfg.width, &mut rng);
    let shapes = rng.random_range(1..=4);
    for _ in 0..shapes {
        let class = rng.random_range(1..cfg.classes);
        canvas.paint(class, cfg.classes, &mut rng);
    }
    if cfg.augment {
        if rng.random_bool(0.5) {
            canvas.flip();
        }
        let s = SCALES[rng.random_range(0..SCALES.len())];
        canvas.rescale(s, &mut rng);
        canvas.jitter(&mut rng);
    }
    Ok(canvas.into_sample())
}

/// Samples `0..count` of the stream.
pub fn synth_dataset(cfg: &SynthConfig, count: usize) -> Result<impl Iterator<Item = SynthSample> + '_> {
    cfg.validate()?;
    Ok((0..count as u64).map(move |i| synth_sample(cfg, i).expect("config validated")))
}

/// Stacks samples into a `[N, 3, H, W]` batch and an `N x H x W` label map.
pub fn collate(samples: &[SynthSample]) -> Result<(Tensor<f32>, LabelMap)> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<LabelMap> = samples.iter().map(|s| s.label.clone()).collect();
    Ok((Tensor::stack(&images)?, LabelMap::stack(&labels)?))
}
