//! Tikhonov-gradient low/high frequency split.
//!
//! `split` solves `argmin_X 0.5||X - X0||^2 + (beta/2)||grad X||^2` in closed
//! form as a Fourier multiplier, with `grad` the periodic forward-difference
//! operator. The high-pass remainder is what the dictionary models; the
//! low-pass part re-enters the reconstruction through the residual connection.

use crate::error::{Error, Result};
use crate::linops::{forward_a, fourier_multiplier, ComplexImage, KSpace, LowResMask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HighpassConfig {
    /// Tikhonov weight on the gradient term; 0 disables the split.
    pub beta: f64,
}

impl Default for HighpassConfig {
    fn default() -> Self {
        // middle of the usual pretraining grid {0.1, 0.25, 0.5}
        Self { beta: 0.25 }
    }
}

/// Symbol of the periodic forward-difference Laplacian on an h x w grid:
/// `|gamma(f)|^2 = 4 sin^2(pi fy / h) + 4 sin^2(pi fx / w)`.
pub fn gradient_symbol_sq(h: usize, w: usize) -> Vec<f64> {
    let mut sym = vec![0.0; h * w];
    for y in 0..h {
        let sy = (std::f64::consts::PI * y as f64 / h as f64).sin();
        for x in 0..w {
            let sx = (std::f64::consts::PI * x as f64 / w as f64).sin();
            sym[y * w + x] = 4.0 * (sy * sy + sx * sx);
        }
    }
    sym
}

/// Fourier multiplier of the low-pass solve, `1 / (1 + beta |gamma|^2)`.
pub fn lowpass_multiplier(h: usize, w: usize, beta: f64) -> Vec<f64> {
    gradient_symbol_sq(h, w)
        .into_iter()
        .map(|g| 1.0 / (1.0 + beta * g))
        .collect()
}

/// Exact minimizer split `x0 = x_low + x_high`.
pub fn split(x0: &ComplexImage, cfg: &HighpassConfig) -> Result<(ComplexImage, ComplexImage)> {
    if cfg.beta < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "highpass beta must be nonnegative, got {}",
            cfg.beta
        )));
    }
    let mult = lowpass_multiplier(x0.height, x0.width, cfg.beta);
    let x_low = fourier_multiplier(x0, &mult);
    let mut x_high = x0.clone();
    for i in 0..x_high.re.len() {
        x_high.re[i] -= x_low.re[i];
        x_high.im[i] -= x_low.im[i];
    }
    Ok((x_low, x_high))
}

/// Residual data `y' = y - A x_low`.
pub fn residual_data(y: &KSpace, x_low: &ComplexImage, mask: &LowResMask) -> Result<KSpace> {
    y.check_same_shape(x_low, "residual_data")?;
    let ax = forward_a(x_low, mask)?;
    let mut out = y.clone();
    for i in 0..out.re.len() {
        out.re[i] -= ax.re[i];
        out.im[i] -= ax.im[i];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = crate::rng::stream(seed, "highpass-test");
        let mut img = ComplexImage::zeros(h, w);
        for v in img.re.iter_mut().chain(img.im.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        img
    }

    /// Forward-difference gradient as an explicit matrix pair, for the
    /// normal-equation oracle: rows of d/dy stacked over rows of d/dx.
    fn apply_grad_t_grad(x: &[f64], h: usize, w: usize) -> Vec<f64> {
        // (grad^T grad x)[p] assembled literally from the stencil
        let idx = |y: usize, x_: usize| ((y % h) * w + (x_ % w)) as usize;
        let mut out = vec![0.0; h * w];
        // vertical differences: g[y,x] = x[y+1,x] - x[y,x]
        for y in 0..h {
            for xx in 0..w {
                let g = x[idx(y + 1, xx)] - x[idx(y, xx)];
                out[idx(y, xx)] -= g;
                out[idx(y + 1, xx)] += g;
            }
        }
        // horizontal differences
        for y in 0..h {
            for xx in 0..w {
                let g = x[idx(y, xx + 1)] - x[idx(y, xx)];
                out[idx(y, xx)] -= g;
                out[idx(y, xx + 1)] += g;
            }
        }
        out
    }

    #[test]
    fn beta_zero_is_identity_split() {
        let x0 = random_image(8, 8, 1);
        let (low, high) = split(&x0, &HighpassConfig { beta: 0.0 }).unwrap();
        for i in 0..64 {
            assert_relative_eq!(low.re[i], x0.re[i], epsilon = 1e-12);
            assert_relative_eq!(high.re[i], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_image_passes_through() {
        let mut x0 = ComplexImage::zeros(8, 8);
        x0.re.fill(0.7);
        x0.im.fill(-0.2);
        let (low, high) = split(&x0, &HighpassConfig { beta: 0.5 }).unwrap();
        for i in 0..64 {
            assert_relative_eq!(low.re[i], 0.7, epsilon = 1e-12);
            assert_relative_eq!(low.im[i], -0.2, epsilon = 1e-12);
            assert_relative_eq!(high.re[i], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn solution_satisfies_normal_equations() {
        // (I + beta grad^T grad) x_low = x0, residual checked in inf-norm
        for (seed, beta) in [(2u64, 0.1), (3, 0.25), (4, 0.5)] {
            let x0 = random_image(16, 16, seed);
            let (low, _) = split(&x0, &HighpassConfig { beta }).unwrap();
            for (plane_low, plane_x0) in [(&low.re, &x0.re), (&low.im, &x0.im)] {
                let gtg = apply_grad_t_grad(plane_low, 16, 16);
                let mut inf = 0.0f64;
                for i in 0..256 {
                    let r = plane_low[i] + beta * gtg[i] - plane_x0[i];
                    inf = inf.max(r.abs());
                }
                assert!(inf < 1e-9, "residual inf-norm {inf} at beta={beta}");
            }
        }
    }

    #[test]
    fn split_of_low_part_is_fixed_point_on_high_component() {
        let x0 = random_image(16, 16, 5);
        let cfg = HighpassConfig { beta: 0.25 };
        let (low, high) = split(&x0, &cfg).unwrap();
        let (_, high2) = split(&low, &cfg).unwrap();
        // contraction: re-splitting the low part leaves less high energy
        assert!(high2.norm_sq().sqrt() <= high.norm_sq().sqrt() + 1e-10);
    }

    #[test]
    fn energy_split_identity_holds() {
        let x0 = random_image(8, 8, 6);
        let (low, high) = split(&x0, &HighpassConfig { beta: 0.25 }).unwrap();
        let cross = low.dot(&high);
        let total = low.norm_sq() + high.norm_sq() + 2.0 * cross;
        assert_relative_eq!(total, x0.norm_sq(), max_relative = 1e-12);
        // multiplier in (0, 1] makes the frequency-wise cross term nonnegative
        assert!(cross >= -1e-12);
    }

    #[test]
    fn larger_beta_never_increases_lowpass_magnitude() {
        let m1 = lowpass_multiplier(8, 8, 0.1);
        let m2 = lowpass_multiplier(8, 8, 0.5);
        for i in 0..64 {
            assert!(m2[i] <= m1[i] + 1e-15);
            assert!(m1[i] <= 1.0 && m1[i] > 0.0);
        }
    }

    #[test]
    fn negative_beta_is_rejected() {
        let x0 = random_image(8, 8, 7);
        assert!(split(&x0, &HighpassConfig { beta: -1.0 }).is_err());
    }

    #[test]
    fn residual_with_zero_lowpass_is_unchanged() {
        let y = random_image(8, 8, 8);
        let mask = LowResMask::centered(8, 8, 4, 4);
        let r = residual_data(&y, &ComplexImage::zeros(8, 8), &mask).unwrap();
        assert_eq!(r, y);
    }

    #[test]
    fn residual_of_own_forward_is_zero() {
        let x = random_image(8, 8, 9);
        let mask = LowResMask::centered(8, 8, 4, 4);
        let y = forward_a(&x, &mask).unwrap();
        let r = residual_data(&y, &x, &mask).unwrap();
        assert!(r.norm_sq() < 1e-24);
    }

    #[test]
    fn residual_is_linear_in_both_arguments() {
        // two-term superposition against independent recomputation
        let mask = LowResMask::centered(8, 8, 4, 4);
        let y1 = random_image(8, 8, 10);
        let y2 = random_image(8, 8, 11);
        let x1 = random_image(8, 8, 12);
        let x2 = random_image(8, 8, 13);

        let mut y_sum = y1.clone();
        for i in 0..64 {
            y_sum.re[i] += y2.re[i];
            y_sum.im[i] += y2.im[i];
        }
        let mut x_sum = x1.clone();
        for i in 0..64 {
            x_sum.re[i] += x2.re[i];
            x_sum.im[i] += x2.im[i];
        }
        let combined = residual_data(&y_sum, &x_sum, &mask).unwrap();
        let r1 = residual_data(&y1, &x1, &mask).unwrap();
        let r2 = residual_data(&y2, &x2, &mask).unwrap();
        for i in 0..64 {
            assert_relative_eq!(combined.re[i], r1.re[i] + r2.re[i], epsilon = 1e-12);
            assert_relative_eq!(combined.im[i], r1.im[i] + r2.im[i], epsilon = 1e-12);
        }
    }
}
