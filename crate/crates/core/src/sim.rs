//! Synthetic phantoms and retrospective measurement simulation.
//!
//! Phantoms are deterministic in `(kind, h, w, seed)`: a normalized
//! magnitude layout with a smooth, low-frequency random phase. Measurement
//! simulation applies the forward model and adds i.i.d. complex Gaussian
//! noise on the retained frequencies only, with total per-sample variance
//! `sigma_sq` (so `sigma_sq / 2` per real component).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linops::{forward_a, ComplexImage, KSpace, LowResMask};

/// Additive complex Gaussian measurement noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// Total variance per complex sample.
    pub sigma_sq: f64,
    pub seed: u64,
}

impl NoiseModel {
    /// The two high-noise presets used by the experiments.
    pub const SIGMA_SQ_PRESETS: [f64; 2] = [0.2, 0.3];

    pub fn new(sigma_sq: f64, seed: u64) -> Result<Self> {
        if sigma_sq < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "noise variance must be nonnegative, got {sigma_sq}"
            )));
        }
        Ok(Self { sigma_sq, seed })
    }
}

/// `y = A x_true + e`, noise drawn only on retained frequencies.
pub fn simulate(x_true: &ComplexImage, mask: &LowResMask, noise: &NoiseModel) -> Result<KSpace> {
    let mut y = forward_a(x_true, mask)?;
    if noise.sigma_sq > 0.0 {
        let std = (noise.sigma_sq / 2.0).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut rng = crate::rng::stream(noise.seed, "simulate-noise");
        for i in 0..y.re.len() {
            if mask.keep[i] {
                y.re[i] += normal.sample(&mut rng);
                y.im[i] += normal.sample(&mut rng);
            }
        }
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    SheppLoganLike,
    RandomBlobs,
    PiecewiseSmooth,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shepp-logan" | "shepp_logan" | "shepp" => Ok(Self::SheppLoganLike),
            "blobs" | "random-blobs" => Ok(Self::RandomBlobs),
            "piecewise" | "piecewise-smooth" => Ok(Self::PiecewiseSmooth),
            other => Err(Error::InvalidConfig(format!("unknown phantom kind `{other}`"))),
        }
    }
}

/// Deterministic phantom with magnitude in [0, 1] and smooth random phase.
pub fn phantom(kind: PhantomKind, h: usize, w: usize, seed: u64) -> Result<ComplexImage> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidConfig(format!("phantom sides must be even, got {h}x{w}")));
    }
    let mag = match kind {
        PhantomKind::SheppLoganLike => shepp_logan_magnitude(h, w, seed),
        PhantomKind::RandomBlobs => {
            let mut rng = crate::rng::stream(seed, "phantom/blob-count");
            let count = rng.gen_range(4..=9);
            blobs_magnitude(h, w, count, seed)
        }
        PhantomKind::PiecewiseSmooth => piecewise_magnitude(h, w, seed),
    };
    Ok(with_smooth_phase(normalize(mag), h, w, seed))
}

/// Gaussian-bump phantom with an explicit bump count (0 gives a zero image).
pub fn random_blobs_with_count(h: usize, w: usize, count: usize, seed: u64) -> Result<ComplexImage> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidConfig(format!("phantom sides must be even, got {h}x{w}")));
    }
    Ok(with_smooth_phase(normalize(blobs_magnitude(h, w, count, seed)), h, w, seed))
}

fn normalize(mut mag: Vec<f64>) -> Vec<f64> {
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut mag {
            *v = (*v / peak).clamp(0.0, 1.0);
        }
    }
    mag
}

fn with_smooth_phase(mag: Vec<f64>, h: usize, w: usize, seed: u64) -> ComplexImage {
    let mut rng = crate::rng::stream(seed, "phantom/phase");
    // three low-frequency plane waves, amplitudes within +-0.4 rad
    let terms: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut img = ComplexImage::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
            let mut phase = 0.0;
            for &(amp, fy, fx, off) in &terms {
                phase += amp * (std::f64::consts::TAU * (fy * u + fx * v) + off).sin();
            }
            let m = mag[y * w + x];
            img.re[y * w + x] = m * phase.cos();
            img.im[y * w + x] = m * phase.sin();
        }
    }
    img
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle_deg: f64,
    intensity: f64,
}

/// Head-phantom ellipse layout with a small seeded jitter for variety.
fn shepp_logan_magnitude(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let base = [
        (0.0, 0.0, 0.92, 0.69, 90.0, 2.0),
        (0.0, -0.0184, 0.874, 0.6624, 90.0, -0.98),
        (0.22, 0.0, 0.31, 0.11, 72.0, -0.2),
        (-0.22, 0.0, 0.41, 0.16, 108.0, -0.2),
        (0.0, 0.35, 0.25, 0.21, 90.0, 0.1),
        (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
        (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
        (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
        (0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
        (0.06, -0.605, 0.046, 0.023, 90.0, 0.1),
    ];
    let mut rng = crate::rng::stream(seed, "phantom/shepp-jitter");
    let ellipses: Vec<Ellipse> = base
        .iter()
        .map(|&(cx, cy, rx, ry, ang, val)| Ellipse {
            cy: cy + rng.gen_range(-0.03..0.03),
            cx: cx + rng.gen_range(-0.03..0.03),
            ry: ry * rng.gen_range(0.93..1.07),
            rx: rx * rng.gen_range(0.93..1.07),
            angle_deg: ang + rng.gen_range(-4.0..4.0),
            intensity: val,
        })
        .collect();
    render_ellipses(h, w, &ellipses).into_iter().map(|v| v.max(0.0)).collect()
}

fn render_ellipses(h: usize, w: usize, ellipses: &[Ellipse]) -> Vec<f64> {
    let mut mag = vec![0.0; h * w];
    for e in ellipses {
        let theta = e.angle_deg.to_radians();
        let (st, ct) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                // pixel in [-1, 1]^2
                let py = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
                let px = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
                let dy = py - e.cy;
                let dx = px - e.cx;
                let ry = ct * dy - st * dx;
                let rx = st * dy + ct * dx;
                if (rx / e.rx).powi(2) + (ry / e.ry).powi(2) <= 1.0 {
                    mag[y * w + x] += e.intensity;
                }
            }
        }
    }
    mag
}

fn blobs_magnitude(h: usize, w: usize, count: usize, seed: u64) -> Vec<f64> {
    let mut rng = crate::rng::stream(seed, "phantom/blobs");
    let mut mag = vec![0.0; h * w];
    let scale = h.min(w) as f64;
    for _ in 0..count {
        let cy = rng.gen_range(0.15..0.85) * h as f64;
        let cx = rng.gen_range(0.15..0.85) * w as f64;
        let sigma = rng.gen_range(0.05..0.18) * scale;
        let amp = rng.gen_range(0.3..1.0);
        for y in 0..h {
            for x in 0..w {
                let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * sigma * sigma);
                mag[y * w + x] += amp * (-d2).exp();
            }
        }
    }
    mag
}

fn piecewise_magnitude(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = crate::rng::stream(seed, "phantom/piecewise");
    let mut mag = vec![0.0; h * w];
    // smooth background
    let terms: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.1..0.3),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
            let mut b = 0.45;
            for &(amp, fy, fx, off) in &terms {
                b += amp * (std::f64::consts::TAU * (fy * u + fx * v) + off).cos();
            }
            mag[y * w + x] = b.max(0.0);
        }
    }
    // constant-intensity pieces with hard edges
    let pieces = rng.gen_range(4..=6);
    for _ in 0..pieces {
        let rect = rng.gen_bool(0.5);
        let cy = rng.gen_range(0.2..0.8) * h as f64;
        let cx = rng.gen_range(0.2..0.8) * w as f64;
        let ry = rng.gen_range(0.06..0.22) * h as f64;
        let rx = rng.gen_range(0.06..0.22) * w as f64;
        let val = if rng.gen_bool(0.5) { rng.gen_range(0.5..1.0) } else { rng.gen_range(-0.9..-0.4) };
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy).abs();
                let dx = (x as f64 - cx).abs();
                let inside = if rect {
                    dy <= ry && dx <= rx
                } else {
                    (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0
                };
                if inside {
                    mag[y * w + x] = (mag[y * w + x] + val).max(0.0);
                }
            }
        }
    }
    // a few thin bars for genuine high-frequency content
    for _ in 0..rng.gen_range(2..=3) {
        let vertical = rng.gen_bool(0.5);
        let pos = rng.gen_range(0.15..0.85);
        let span = (rng.gen_range(0.3..0.7), rng.gen_range(0.15..0.6));
        let thickness = rng.gen_range(1..=2usize);
        let val = rng.gen_range(0.6..1.0);
        let (lo, len) = (
            (span.1 * if vertical { h } else { w } as f64) as usize,
            (span.0 * if vertical { h } else { w } as f64) as usize,
        );
        let at = (pos * if vertical { w } else { h } as f64) as usize;
        for t in 0..thickness {
            for s in lo..(lo + len).min(if vertical { h } else { w }) {
                let (y, x) = if vertical { (s, (at + t).min(w - 1)) } else { ((at + t).min(h - 1), s) };
                mag[y * w + x] = (mag[y * w + x] + val).min(1.6);
            }
        }
    }
    mag
}
