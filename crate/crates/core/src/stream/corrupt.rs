//! Image corruptions with five severity levels.
//!
//! Each kind maps a severity in `1..=5` to a parameter set through a fixed
//! table whose distortion strength grows with severity. Every kind also has
//! a neutral parameter set that leaves images unchanged.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{config_err, shape_err, Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAX_SEVERITY: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    Contrast,
    Brightness,
    Fog,
    Pixelate,
    /// Uncorrupted source-distribution images; every severity is neutral.
    Clean,
}

impl CorruptionKind {
    /// The ten corruption families (excludes [`CorruptionKind::Clean`]).
    pub const ALL: [CorruptionKind; 10] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::GlassBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Fog,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::GlassBlur => "glass_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Clean => "clean",
        }
    }

    /// Parameters for `severity` in `1..=5`.
    pub fn params(self, severity: u8) -> Result<CorruptionParams> {
        if !(1..=MAX_SEVERITY).contains(&severity) {
            return Err(config_err!("severity must be in 1..=5, got {}", severity));
        }
        let s = (severity - 1) as usize;
        Ok(match self {
            CorruptionKind::GaussianNoise => {
                CorruptionParams::Gaussian { sigma: [0.04, 0.08, 0.12, 0.18, 0.26][s] }
            }
            CorruptionKind::ShotNoise => {
                CorruptionParams::Shot { photons: [40.0, 20.0, 10.0, 5.0, 2.5][s] }
            }
            CorruptionKind::ImpulseNoise => {
                CorruptionParams::Impulse { amount: [0.03, 0.06, 0.1, 0.15, 0.22][s] }
            }
            CorruptionKind::DefocusBlur => {
                CorruptionParams::Defocus { radius: [1.0, 1.6, 2.3, 3.0, 3.8][s] }
            }
            CorruptionKind::GlassBlur => {
                let (blend, swap_prob, max_shift, iterations) = [
                    (0.2, 0.15, 1, 1),
                    (0.4, 0.3, 1, 1),
                    (0.6, 0.5, 1, 2),
                    (0.8, 0.7, 1, 3),
                    (1.0, 0.55, 2, 2),
                ][s];
                CorruptionParams::Glass { blend, swap_prob, max_shift, iterations }
            }
            CorruptionKind::MotionBlur => {
                CorruptionParams::Motion { length: [2.0, 3.0, 4.0, 5.5, 7.0][s] }
            }
            CorruptionKind::Contrast => {
                CorruptionParams::Contrast { factor: [0.7, 0.55, 0.42, 0.32, 0.24][s] }
            }
            CorruptionKind::Brightness => {
                CorruptionParams::Brightness { shift: [0.1, 0.2, 0.3, 0.4, 0.5][s] }
            }
            CorruptionKind::Fog => CorruptionParams::Fog { strength: [0.3, 0.5, 0.7, 1.0, 1.4][s] },
            CorruptionKind::Pixelate => {
                CorruptionParams::Pixelate { factor: [1.5, 2.0, 2.67, 3.2, 4.0][s] }
            }
            CorruptionKind::Clean => self.neutral_params(),
        })
    }

    /// The identity member of this kind's parameter family.
    pub fn neutral_params(self) -> CorruptionParams {
        match self {
            CorruptionKind::GaussianNoise => CorruptionParams::Gaussian { sigma: 0.0 },
            CorruptionKind::ShotNoise => CorruptionParams::Shot { photons: f32::INFINITY },
            CorruptionKind::ImpulseNoise => CorruptionParams::Impulse { amount: 0.0 },
            CorruptionKind::DefocusBlur => CorruptionParams::Defocus { radius: 0.0 },
            CorruptionKind::GlassBlur => {
                CorruptionParams::Glass { blend: 0.0, swap_prob: 0.0, max_shift: 0, iterations: 0 }
            }
            CorruptionKind::MotionBlur => CorruptionParams::Motion { length: 1.0 },
            CorruptionKind::Contrast => CorruptionParams::Contrast { factor: 1.0 },
            CorruptionKind::Brightness => CorruptionParams::Brightness { shift: 0.0 },
            CorruptionKind::Fog => CorruptionParams::Fog { strength: 0.0 },
            CorruptionKind::Pixelate => CorruptionParams::Pixelate { factor: 1.0 },
            CorruptionKind::Clean => CorruptionParams::Identity,
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .chain([CorruptionKind::Clean])
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err!("unknown corruption kind `{}`", s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorruptionParams {
    Identity,
    /// `x + σ·ε`.
    Gaussian { sigma: f32 },
    /// `Poisson(x·photons)/photons`.
    Shot { photons: f32 },
    /// Each pixel independently set to 0 or 1 with probability `amount`.
    Impulse { amount: f32 },
    /// Average over an anti-aliased disk of `radius` pixels.
    Defocus { radius: f32 },
    /// Pixels swap with a random neighbour within `max_shift` with
    /// probability `swap_prob`, `iterations` times, then a box blur is
    /// blended in.
    Glass { blend: f32, swap_prob: f64, max_shift: usize, iterations: usize },
    /// Average along a random direction over a streak `length − 1` pixels
    /// long, sampled at unit-or-finer spacing.
    Motion { length: f32 },
    /// Pull towards the image mean: `(x − μ)·factor + μ`.
    Contrast { factor: f32 },
    Brightness { shift: f32 },
    /// Additive low-frequency haze, renormalized to the original maximum.
    Fog { strength: f32 },
    /// Area downscale by `factor`, nearest-neighbour upscale.
    Pixelate { factor: f32 },
}

/// Corrupts one `[1×H×W]` image with values in `[0, 1]`; the output is
/// clipped to `[0, 1]`.
pub fn corrupt(img: &Tensor, kind: CorruptionKind, severity: u8, rng: &mut Rng) -> Result<Tensor> {
    let params = kind.params(severity)?;
    apply(img, params, rng)
}

pub fn apply(img: &Tensor, params: CorruptionParams, rng: &mut Rng) -> Result<Tensor> {
    let &[1, h, w] = img.shape() else {
        return Err(shape_err!("corrupt expects a [1×H×W] image, got {:?}", img.shape()));
    };
    let out = apply_plane(img.data(), h, w, params, rng);
    Tensor::new(img.shape(), out)
}

pub(crate) fn apply_plane(x: &[f32], h: usize, w: usize, params: CorruptionParams, rng: &mut Rng) -> Vec<f32> {
    let mut out = match params {
        CorruptionParams::Identity => x.to_vec(),
        CorruptionParams::Gaussian { sigma } => {
            if sigma == 0.0 {
                x.to_vec()
            } else {
                let n = Normal::new(0.0f32, sigma).expect("finite sigma");
                x.iter().map(|&v| v + n.sample(rng)).collect()
            }
        }
        CorruptionParams::Shot { photons } => {
            if !photons.is_finite() {
                x.to_vec()
            } else {
                x.iter()
                    .map(|&v| {
                        let lambda = v.max(0.0) * photons;
                        if lambda <= 0.0 {
                            0.0
                        } else {
                            Poisson::new(lambda).expect("positive rate").sample(rng) / photons
                        }
                    })
                    .collect()
            }
        }
        CorruptionParams::Impulse { amount } => x
            .iter()
            .map(|&v| {
                if amount > 0.0 && rng.random::<f32>() < amount {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
        CorruptionParams::Defocus { radius } => {
            let r = math::floor(radius + 0.5) as isize;
            let mut taps = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let d = math::sqrt((dx * dx + dy * dy) as f32);
                    let weight = (radius + 0.5 - d).clamp(0.0, 1.0);
                    if weight > 0.0 {
                        taps.push((dy, dx, weight));
                    }
                }
            }
            convolve_taps(x, h, w, &taps)
        }
        CorruptionParams::Glass { blend, swap_prob, max_shift, iterations } => {
            let mut y = x.to_vec();
            let m = max_shift as i64;
            for _ in 0..iterations {
                for row in 0..h {
                    for col in 0..w {
                        if !rng.random_bool(swap_prob) {
                            continue;
                        }
                        let dy = rng.random_range(-m..=m) as isize;
                        let dx = rng.random_range(-m..=m) as isize;
                        let (ry, rx) = (row as isize + dy, col as isize + dx);
                        if ry >= 0 && rx >= 0 && (ry as usize) < h && (rx as usize) < w {
                            y.swap(row * w + col, ry as usize * w + rx as usize);
                        }
                    }
                }
            }
            if blend > 0.0 {
                let taps: Vec<_> = (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx, 1.0))).collect();
                let blurred = convolve_taps(&y, h, w, &taps);
                for (v, b) in y.iter_mut().zip(blurred) {
                    *v = (1.0 - blend) * *v + blend * b;
                }
            }
            y
        }
        CorruptionParams::Motion { length } => {
            if length <= 1.0 {
                x.to_vec()
            } else {
                let n = math::ceil(length) as usize;
                let spacing = (length - 1.0) / (n - 1) as f32;
                let angle = rng.random_range(0.0f32..core::f32::consts::PI * 2.0);
                let (dy, dx) = (math::sin(angle), math::cos(angle));
                let mut out = vec![0.0; h * w];
                for row in 0..h {
                    for col in 0..w {
                        let mut s = 0.0;
                        for i in 0..n {
                            let t = i as f32 * spacing;
                            s += bilinear_clamped(x, h, w, row as f32 + t * dy, col as f32 + t * dx);
                        }
                        out[row * w + col] = s / n as f32;
                    }
                }
                out
            }
        }
        CorruptionParams::Contrast { factor } => {
            let mean = x.iter().sum::<f32>() / x.len() as f32;
            x.iter().map(|&v| (v - mean) * factor + mean).collect()
        }
        CorruptionParams::Brightness { shift } => x.iter().map(|&v| v + shift).collect(),
        CorruptionParams::Fog { strength } => {
            if strength == 0.0 {
                x.to_vec()
            } else {
                let haze = haze_field(h, w, rng);
                let m = x.iter().copied().fold(0.0f32, f32::max).max(1e-3);
                x.iter().zip(&haze).map(|(&v, &f)| (v + strength * f) * m / (m + strength)).collect()
            }
        }
        CorruptionParams::Pixelate { factor } => pixelate(x, h, w, factor),
    };
    out.iter_mut().for_each(|v| *v = math::clamp01(*v));
    out
}

/// Weighted average over `(dy, dx, weight)` offsets with edge clamping.
fn convolve_taps(x: &[f32], h: usize, w: usize, taps: &[(isize, isize, f32)]) -> Vec<f32> {
    let norm = 1.0 / taps.iter().map(|t| t.2).sum::<f32>();
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut s = 0.0;
            for &(dy, dx, weight) in taps {
                let ry = (row as isize + dy).clamp(0, h as isize - 1) as usize;
                let rx = (col as isize + dx).clamp(0, w as isize - 1) as usize;
                s += weight * x[ry * w + rx];
            }
            out[row * w + col] = s * norm;
        }
    }
    out
}

fn bilinear_clamped(x: &[f32], h: usize, w: usize, y: f32, xx: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let xx = xx.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (math::floor(y) as usize, math::floor(xx) as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, xx - x0 as f32);
    let top = x[y0 * w + x0] * (1.0 - fx) + x[y0 * w + x1] * fx;
    let bot = x[y1 * w + x0] * (1.0 - fx) + x[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Smooth random field in `[0, 1]`: a 4×4 and an 8×8 random grid,
/// bilinearly upsampled and summed with weights 1 and 1/2.
fn haze_field(h: usize, w: usize, rng: &mut Rng) -> Vec<f32> {
    let mut field = vec![0.0; h * w];
    for (cells, weight) in [(4usize, 1.0f32), (8, 0.5)] {
        let grid: Vec<f32> = (0..cells * cells).map(|_| rng.random::<f32>()).collect();
        for row in 0..h {
            for col in 0..w {
                let gy = (row as f32 + 0.5) * cells as f32 / h as f32 - 0.5;
                let gx = (col as f32 + 0.5) * cells as f32 / w as f32 - 0.5;
                field[row * w + col] += weight * bilinear_clamped(&grid, cells, cells, gy, gx);
            }
        }
    }
    let lo = field.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = field.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    field.iter().map(|&v| (v - lo) / span).collect()
}

fn pixelate(x: &[f32], h: usize, w: usize, factor: f32) -> Vec<f32> {
    let lh = (math::round(h as f32 / factor) as usize).clamp(1, h);
    let lw = (math::round(w as f32 / factor) as usize).clamp(1, w);
    // pixel -> low-res cell by centre position; area average, then paint back
    let cell_of = |i: usize, full: usize, low: usize| ((i as f32 + 0.5) * low as f32 / full as f32) as usize;
    let mut sums = vec![0.0f32; lh * lw];
    let mut counts = vec![0usize; lh * lw];
    for row in 0..h {
        for col in 0..w {
            let c = cell_of(row, h, lh) * lw + cell_of(col, w, lw);
            sums[c] += x[row * w + col];
            counts[c] += 1;
        }
    }
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let c = cell_of(row, h, lh) * lw + cell_of(col, w, lw);
            out[row * w + col] = sums[c] / counts[c] as f32;
        }
    }
    out
}
