//! Procedural 16×16 glyphs: parametric strokes and outlines with random
//! placement, scale, rotation, stroke width and intensity. Classes are bars,
//! crosses, a ring, a square, two triangles, a T and a double bar.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{config_err, Result};
use crate::math;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const SIDE: usize = 16;
pub const MIN_CLASSES: usize = 2;
pub const MAX_CLASSES: usize = 10;

type Seg = [(f32, f32); 2];

enum Shape {
    Strokes(&'static [Seg]),
    Ring(f32),
}

const SQUARE: &[Seg] = &[
    [(-0.75, -0.75), (0.75, -0.75)],
    [(0.75, -0.75), (0.75, 0.75)],
    [(0.75, 0.75), (-0.75, 0.75)],
    [(-0.75, 0.75), (-0.75, -0.75)],
];
const TRIANGLE: &[Seg] = &[
    [(0.0, -0.85), (0.85, 0.7)],
    [(0.85, 0.7), (-0.85, 0.7)],
    [(-0.85, 0.7), (0.0, -0.85)],
];
const TRIANGLE_DOWN: &[Seg] = &[
    [(0.0, 0.85), (0.85, -0.7)],
    [(0.85, -0.7), (-0.85, -0.7)],
    [(-0.85, -0.7), (0.0, 0.85)],
];

// Image y grows downwards. Every template is symmetric under horizontal
// mirroring, so a flipped glyph keeps its class.
const SHAPES: [Shape; MAX_CLASSES] = [
    Shape::Strokes(&[[(0.0, -1.0), (0.0, 1.0)]]),
    Shape::Strokes(&[[(-1.0, 0.0), (1.0, 0.0)]]),
    Shape::Strokes(&[[(0.0, -1.0), (0.0, 1.0)], [(-1.0, 0.0), (1.0, 0.0)]]),
    Shape::Strokes(&[[(-0.8, 0.8), (0.8, -0.8)], [(-0.8, -0.8), (0.8, 0.8)]]),
    Shape::Ring(0.8),
    Shape::Strokes(SQUARE),
    Shape::Strokes(TRIANGLE),
    Shape::Strokes(TRIANGLE_DOWN),
    Shape::Strokes(&[[(-0.9, -0.8), (0.9, -0.8)], [(0.0, -0.8), (0.0, 1.0)]]),
    Shape::Strokes(&[[(-0.9, -0.45), (0.9, -0.45)], [(-0.9, 0.45), (0.9, 0.45)]]),
];

fn seg_dist(p: (f32, f32), s: &Seg) -> f32 {
    let (a, b) = (s[0], s[1]);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    math::sqrt(qx * qx + qy * qy)
}

/// Renders one glyph of `class` into a `SIDE×SIDE` buffer with values in
/// `[0, 1]`.
pub fn render(class: usize, rng: &mut Rng) -> Vec<f32> {
    let shape = &SHAPES[class];
    let half = (SIDE as f32) / 2.0;
    let cx = half + rng.random_range(-1.5f32..1.5);
    let cy = half + rng.random_range(-1.5f32..1.5);
    let scale = 6.0 * rng.random_range(0.8f32..1.1);
    let angle = rng.random_range(-0.2f32..0.2);
    let width = rng.random_range(1.1f32..1.9);
    let fg = rng.random_range(0.7f32..1.0);
    let bg = rng.random_range(0.0f32..0.2);
    let (sn, cs) = (math::sin(angle), math::cos(angle));
    let mut img = vec![0.0; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            // rotate into template frame, in pixel units
            let (u, v) = (cs * px + sn * py, -sn * px + cs * py);
            let d = match shape {
                Shape::Strokes(segs) => segs
                    .iter()
                    .map(|s| {
                        let s = [(s[0].0 * scale, s[0].1 * scale), (s[1].0 * scale, s[1].1 * scale)];
                        seg_dist((u, v), &s)
                    })
                    .fold(f32::INFINITY, f32::min),
                Shape::Ring(r) => (math::sqrt(u * u + v * v) - r * scale).abs(),
            };
            let cover = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            img[y * SIDE + x] = bg + (fg - bg) * cover;
        }
    }
    img
}

/// A class-balanced labeled set of clean glyphs.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl GlyphDataset {
    /// `per_class` glyphs of each of `num_classes` classes, shuffled.
    pub fn generate(num_classes: usize, per_class: usize, seed: u64) -> Result<Self> {
        check_classes(num_classes)?;
        if per_class == 0 {
            return Err(config_err!("glyph dataset needs at least one image per class"));
        }
        let mut labels: Vec<usize> = (0..num_classes * per_class).map(|i| i % num_classes).collect();
        let mut rng = rng::derived(seed, 0x676c_7970);
        labels.shuffle(&mut rng);
        let mut data = Vec::with_capacity(labels.len() * SIDE * SIDE);
        for &l in &labels {
            data.extend(render(l, &mut rng));
        }
        let images = Tensor::new(&[labels.len(), 1, SIDE, SIDE], data)?;
        Ok(Self { images, labels, num_classes, seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) fn check_classes(num_classes: usize) -> Result<()> {
    if !(MIN_CLASSES..=MAX_CLASSES).contains(&num_classes) {
        return Err(config_err!(
            "glyph classes must be in {}..={}, got {}",
            MIN_CLASSES,
            MAX_CLASSES,
            num_classes
        ));
    }
    Ok(())
}
