//! Evaluation metrics: masked MSE, masked SSIM on magnitudes, and a
//! reference-free blur score.
//!
//! Backgrounds are discarded through an [`EvalMask`] derived from the
//! target image. SSIM uses the standard 11x11 Gaussian window with
//! sigma 1.5 and constants k1 = 0.01, k2 = 0.03; windows are clipped at
//! the image border with their weights renormalized, and only windows
//! centered on a foreground pixel contribute.

use crate::error::{Error, Result};
use crate::linops::ComplexImage;

/// Foreground mask for background-discarding metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMask {
    pub height: usize,
    pub width: usize,
    pub fg: Vec<bool>,
}

impl EvalMask {
    pub fn all(height: usize, width: usize) -> Self {
        Self { height, width, fg: vec![true; height * width] }
    }

    pub fn foreground_count(&self) -> usize {
        self.fg.iter().filter(|&&b| b).count()
    }
}

/// Threshold the reference magnitude at `threshold_frac` of its peak,
/// then apply one 3x3 morphological closing pass.
pub fn eval_mask_from(reference: &ComplexImage, threshold_frac: f64) -> Result<EvalMask> {
    let (h, w) = (reference.height, reference.width);
    let mag = reference.magnitude();
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::EmptyMask);
    }
    let threshold = threshold_frac * peak;
    let fg: Vec<bool> = mag.iter().map(|&m| m >= threshold).collect();

    let neighborhood_any = |src: &[bool], y: usize, x: usize| -> bool {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 && src[ny as usize * w + nx as usize] {
                    return true;
                }
            }
        }
        false
    };
    let mut dilated = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            dilated[y * w + x] = neighborhood_any(&fg, y, x);
        }
    }
    let mut closed = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            // erosion: all in-bounds neighbors set
            let mut keep = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 && !dilated[ny as usize * w + nx as usize] {
                        keep = false;
                    }
                }
            }
            closed[y * w + x] = keep;
        }
    }
    let mask = EvalMask { height: h, width: w, fg: closed };
    if mask.foreground_count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(mask)
}

fn check_grid(x: &ComplexImage, reference: &ComplexImage, mask: &EvalMask) -> Result<()> {
    x.check_same_shape(reference, "metrics")?;
    if mask.height != x.height || mask.width != x.width {
        return Err(Error::ShapeMismatch {
            context: "metrics",
            axis: "mask grid",
            expected: x.height * x.width,
            actual: mask.height * mask.width,
        });
    }
    if mask.foreground_count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// Mean squared complex deviation over foreground pixels.
pub fn mse(x: &ComplexImage, reference: &ComplexImage, mask: &EvalMask) -> Result<f64> {
    check_grid(x, reference, mask)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..x.re.len() {
        if mask.fg[i] {
            let dr = x.re[i] - reference.re[i];
            let di = x.im[i] - reference.im[i];
            acc += dr * dr + di * di;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut win = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            win[y * SSIM_WINDOW + x] = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    win
}

/// Gaussian-window SSIM of the two magnitude images averaged over
/// foreground-centered windows, dynamic range taken from the reference
/// foreground.
pub fn ssim(x: &ComplexImage, reference: &ComplexImage, mask: &EvalMask) -> Result<f64> {
    check_grid(x, reference, mask)?;
    let (h, w) = (x.height, x.width);
    let mx = x.magnitude();
    let mr = reference.magnitude();

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..mr.len() {
        if mask.fg[i] {
            lo = lo.min(mr[i]);
            hi = hi.max(mr[i]);
        }
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);

    let win = gaussian_window();
    let half = (SSIM_WINDOW / 2) as i64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for cy in 0..h {
        for cx in 0..w {
            if !mask.fg[cy * w + cx] {
                continue;
            }
            let mut wsum = 0.0;
            let mut mu_x = 0.0;
            let mut mu_r = 0.0;
            let mut xx = 0.0;
            let mut rr = 0.0;
            let mut xr = 0.0;
            for dy in -half..=half {
                let py = cy as i64 + dy;
                if py < 0 || py >= h as i64 {
                    continue;
                }
                for dx in -half..=half {
                    let px = cx as i64 + dx;
                    if px < 0 || px >= w as i64 {
                        continue;
                    }
                    let wv = win[(dy + half) as usize * SSIM_WINDOW + (dx + half) as usize];
                    let a = mx[py as usize * w + px as usize];
                    let b = mr[py as usize * w + px as usize];
                    wsum += wv;
                    mu_x += wv * a;
                    mu_r += wv * b;
                    xx += wv * a * a;
                    rr += wv * b * b;
                    xr += wv * a * b;
                }
            }
            mu_x /= wsum;
            mu_r /= wsum;
            let var_x = xx / wsum - mu_x * mu_x;
            let var_r = rr / wsum - mu_r * mu_r;
            let cov = xr / wsum - mu_x * mu_r;
            let value = ((2.0 * mu_x * mu_r + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_r * mu_r + c1) * (var_x + var_r + c2));
            total += value;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

const BLUR_TAPS: usize = 9;

/// Reference-free blur score in [0, 1]; higher means blurrier.
///
/// Re-blurs the magnitude image with a 9-tap box kernel along each axis,
/// compares neighboring-pixel variation before and after, and keeps the
/// blurrier of the two directional scores. A constant image scores 1.0.
pub fn blur_metric(x: &ComplexImage) -> f64 {
    let (h, w) = (x.height, x.width);
    let mag = x.magnitude();
    let half = BLUR_TAPS as i64 / 2;

    // box blur along one axis with edge clamping
    let blur_axis = |vertical: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for d in -half..=half {
                    let (py, px) = if vertical {
                        ((y as i64 + d).clamp(0, h as i64 - 1), xx as i64)
                    } else {
                        (y as i64, (xx as i64 + d).clamp(0, w as i64 - 1))
                    };
                    acc += mag[py as usize * w + px as usize];
                }
                out[y * w + xx] = acc / BLUR_TAPS as f64;
            }
        }
        out
    };

    let score_axis = |vertical: bool| -> Option<f64> {
        let blurred = blur_axis(vertical);
        let mut s_orig = 0.0;
        let mut s_lost = 0.0;
        let (y0, x0) = if vertical { (1, 0) } else { (0, 1) };
        for y in y0..h {
            for xx in x0..w {
                let (py, px) = if vertical { (y - 1, xx) } else { (y, xx - 1) };
                let d_orig = (mag[y * w + xx] - mag[py * w + px]).abs();
                let d_blur = (blurred[y * w + xx] - blurred[py * w + px]).abs();
                s_orig += d_orig;
                s_lost += (d_orig - d_blur).max(0.0);
            }
        }
        if s_orig > 0.0 {
            Some((s_orig - s_lost) / s_orig)
        } else {
            None
        }
    };

    match (score_axis(true), score_axis(false)) {
        (Some(v), Some(hz)) => v.max(hz),
        (Some(v), None) => v.max(1.0),
        (None, Some(hz)) => hz.max(1.0),
        // no variation at all: maximal-blur convention
        (None, None) => 1.0,
    }
}
