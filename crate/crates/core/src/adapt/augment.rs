//! Random test-time augmentations for the augmentation-averaged teacher.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Ranges of the random augmentation composition. Each image of a batch
/// draws its own parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    /// Multiplicative brightness factor range.
    pub brightness: (f32, f32),
    /// Contrast factor range (scaling around the image mean).
    pub contrast: (f32, f32),
    /// Maximum absolute rotation in degrees.
    pub max_rotation_deg: f32,
    /// Maximum absolute translation in pixels, per axis.
    pub max_translate: f32,
    pub scale: (f32, f32),
    /// Probability of a 3×3 gaussian blur, and its sigma range.
    pub blur_prob: f64,
    pub blur_sigma: (f32, f32),
    pub flip_prob: f64,
    /// Additive noise sigma is drawn from `[0, max_noise]`.
    pub max_noise: f32,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            max_rotation_deg: 15.0,
            max_translate: 1.0,
            scale: (0.9, 1.1),
            blur_prob: 0.5,
            blur_sigma: (0.1, 0.5),
            flip_prob: 0.5,
            max_noise: 0.005,
        }
    }
}

impl AugmentPolicy {
    /// Every component disabled: augmentation is the identity.
    pub fn identity() -> Self {
        Self {
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            max_rotation_deg: 0.0,
            max_translate: 0.0,
            scale: (1.0, 1.0),
            blur_prob: 0.0,
            blur_sigma: (0.0, 0.0),
            flip_prob: 0.0,
            max_noise: 0.0,
        }
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn symmetric(rng: &mut Rng, max: f32) -> f32 {
    if max == 0.0 {
        0.0
    } else {
        rng.random_range(-max..max)
    }
}

/// Augments every image of a `[B×1×H×W]` batch; output clipped to `[0, 1]`.
pub fn augment(batch: &Tensor, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Tensor> {
    let &[_, 1, h, w] = batch.shape() else {
        return Err(shape_err!("augment expects [B×1×H×W], got {:?}", batch.shape()));
    };
    let mut out = Vec::with_capacity(batch.numel());
    for img in batch.data().chunks_exact(h * w) {
        out.extend(augment_plane(img, h, w, policy, rng));
    }
    Tensor::new(batch.shape(), out)
}

fn augment_plane(x: &[f32], h: usize, w: usize, p: &AugmentPolicy, rng: &mut Rng) -> Vec<f32> {
    let brightness = uniform(rng, p.brightness);
    let contrast = uniform(rng, p.contrast);
    let angle = symmetric(rng, p.max_rotation_deg).to_radians();
    let (tx, ty) = (symmetric(rng, p.max_translate), symmetric(rng, p.max_translate));
    let scale = uniform(rng, p.scale);
    let blur = p.blur_prob > 0.0 && rng.random_bool(p.blur_prob);
    let sigma = if blur { uniform(rng, p.blur_sigma) } else { 0.0 };
    let flip = p.flip_prob > 0.0 && rng.random_bool(p.flip_prob);
    let noise = if p.max_noise > 0.0 { rng.random_range(0.0..p.max_noise) } else { 0.0 };

    let mut y: Vec<f32> = x.iter().map(|&v| v * brightness).collect();
    if contrast != 1.0 {
        let mean = y.iter().sum::<f32>() / y.len() as f32;
        y.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
    }
    if angle != 0.0 || tx != 0.0 || ty != 0.0 || scale != 1.0 {
        y = affine(&y, h, w, angle, scale, tx, ty);
    }
    if blur {
        y = gaussian3(&y, h, w, sigma);
    }
    if flip {
        for row in y.chunks_exact_mut(w) {
            row.reverse();
        }
    }
    if noise > 0.0 {
        let n = Normal::new(0.0f32, noise).expect("finite sigma");
        y.iter_mut().for_each(|v| *v += n.sample(rng));
    }
    y.iter_mut().for_each(|v| *v = math::clamp01(*v));
    y
}

/// Inverse-maps each output pixel through rotation/scale about the centre
/// plus translation; bilinear sampling with edge replication.
fn affine(x: &[f32], h: usize, w: usize, angle: f32, scale: f32, tx: f32, ty: f32) -> Vec<f32> {
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let (s, c) = (math::sin(angle), math::cos(angle));
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let (dx, dy) = (col as f32 - cx - tx, row as f32 - cy - ty);
            let sx = (c * dx + s * dy) / scale + cx;
            let sy = (-s * dx + c * dy) / scale + cy;
            out[row * w + col] = sample(x, h, w, sy, sx);
        }
    }
    out
}

fn sample(x: &[f32], h: usize, w: usize, y: f32, xx: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let xx = xx.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (math::floor(y) as usize, math::floor(xx) as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, xx - x0 as f32);
    let top = x[y0 * w + x0] * (1.0 - fx) + x[y0 * w + x1] * fx;
    let bot = x[y1 * w + x0] * (1.0 - fx) + x[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn gaussian3(x: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let e = math::exp(-1.0 / (2.0 * sigma * sigma));
    let k = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            tmp[row * w + col] = (0..3)
                .map(|t| k[t] * x[row * w + clamp(col as isize + t as isize - 1, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            out[row * w + col] = (0..3)
                .map(|t| k[t] * tmp[clamp(row as isize + t as isize - 1, h) * w + col])
                .sum();
        }
    }
    out
}
