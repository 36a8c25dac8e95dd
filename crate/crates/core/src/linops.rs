//! Linear operators of the inverse problem.
//!
//! The forward model is a unitary 2D DFT followed by a binary low-pass
//! mask; the synthesis operator convolves per-filter coefficient maps
//! with a bank of small real filters (circular boundary) and sums them.
//! All operators here are pure functions with exact adjoints.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fft::{fft2d_unitary, signed_freq, Direction};
use crate::tensor::{conv2d_backward_input, conv2d_forward, Padding};

/// 2D complex image stored as split real planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, re: vec![0.0; height * width], im: vec![0.0; height * width] }
    }

    pub fn norm_sq(&self) -> f64 {
        self.re.iter().chain(self.im.iter()).map(|v| v * v).sum()
    }

    /// Real inner product `Re<self, other>`.
    pub fn dot(&self, other: &Self) -> f64 {
        self.re.iter().zip(&other.re).map(|(a, b)| a * b).sum::<f64>()
            + self.im.iter().zip(&other.im).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| (r * r + i * i).sqrt()).collect()
    }

    pub fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.height != other.height {
            return Err(Error::ShapeMismatch {
                context,
                axis: "height",
                expected: self.height,
                actual: other.height,
            });
        }
        if self.width != other.width {
            return Err(Error::ShapeMismatch {
                context,
                axis: "width",
                expected: self.width,
                actual: other.width,
            });
        }
        Ok(())
    }
}

/// Frequency-domain data, DC at index (0,0), same layout as the image grid.
pub type KSpace = ComplexImage;

/// Binary low-resolution sampling mask, symmetric about DC.
#[derive(Clone, Debug, PartialEq)]
pub struct LowResMask {
    pub height: usize,
    pub width: usize,
    pub keep_h: usize,
    pub keep_w: usize,
    pub keep: Vec<bool>,
}

impl LowResMask {
    /// Keep the central band of `keep_h` x `keep_w` cycles: frequency
    /// (fy, fx) is retained iff `|fy| <= keep_h/2` and `|fx| <= keep_w/2`.
    pub fn centered(height: usize, width: usize, keep_h: usize, keep_w: usize) -> Self {
        let mut keep = vec![false; height * width];
        for y in 0..height {
            let fy = signed_freq(y, height).unsigned_abs() as f64;
            for x in 0..width {
                let fx = signed_freq(x, width).unsigned_abs() as f64;
                keep[y * width + x] = fy <= keep_h as f64 / 2.0 && fx <= keep_w as f64 / 2.0;
            }
        }
        Self { height, width, keep_h, keep_w, keep }
    }

    pub fn all_pass(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            keep_h: height,
            keep_w: width,
            keep: vec![true; height * width],
        }
    }

    /// Band scaled from the grid, e.g. `0.5` keeps half the bandwidth.
    pub fn from_keep_frac(height: usize, width: usize, frac: f64) -> Self {
        let kh = ((height as f64 * frac).round() as usize).min(height);
        let kw = ((width as f64 * frac).round() as usize).min(width);
        Self::centered(height, width, kh, kw)
    }

    pub fn retained(&self) -> usize {
        self.keep.iter().filter(|&&b| b).count()
    }

    fn apply(&self, y: &mut KSpace) {
        for (i, &k) in self.keep.iter().enumerate() {
            if !k {
                y.re[i] = 0.0;
                y.im[i] = 0.0;
            }
        }
    }
}

/// Metadata carried alongside a trained dictionary.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DictionaryMeta {
    pub beta: f64,
    pub lambda: f64,
    pub corpus: String,
    pub created: String,
}

/// Bank of `K` unit-norm real convolution filters of odd side `kernel_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    pub filter_count: usize,
    pub kernel_size: usize,
    /// Concatenated filters, `filter_count * kernel_size^2` values.
    pub filters: Vec<f64>,
    pub meta: DictionaryMeta,
}

impl Dictionary {
    pub fn new(filter_count: usize, kernel_size: usize, filters: Vec<f64>, meta: DictionaryMeta) -> Result<Self> {
        if filter_count == 0 {
            return Err(Error::InvalidConfig("dictionary needs at least one filter".into()));
        }
        if kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel size must be odd, got {kernel_size}"
            )));
        }
        if filters.len() != filter_count * kernel_size * kernel_size {
            return Err(Error::ShapeMismatch {
                context: "dictionary",
                axis: "filters",
                expected: filter_count * kernel_size * kernel_size,
                actual: filters.len(),
            });
        }
        Ok(Self { filter_count, kernel_size, filters, meta })
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        let n = self.kernel_size * self.kernel_size;
        &self.filters[k * n..(k + 1) * n]
    }

    /// A single centered delta filter; synthesis with it is the identity.
    pub fn delta(kernel_size: usize) -> Self {
        let mut filters = vec![0.0; kernel_size * kernel_size];
        filters[(kernel_size / 2) * kernel_size + kernel_size / 2] = 1.0;
        Self {
            filter_count: 1,
            kernel_size,
            filters,
            meta: DictionaryMeta {
                beta: 0.0,
                lambda: 0.0,
                corpus: "delta".into(),
                created: String::new(),
            },
        }
    }

    pub fn filter_norms(&self) -> Vec<f64> {
        (0..self.filter_count)
            .map(|k| self.filter(k).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Reorder filters by `perm`, where output filter `k` is input `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.filter_count {
            return Err(Error::FilterCountMismatch {
                expected: self.filter_count,
                actual: perm.len(),
            });
        }
        let n = self.kernel_size * self.kernel_size;
        let mut filters = Vec::with_capacity(self.filters.len());
        for &src in perm {
            filters.extend_from_slice(&self.filters[src * n..(src + 1) * n]);
        }
        Ok(Self { filters, ..self.clone() })
    }

    /// Kernel stack `[1, K, k, k]` mapping a coefficient stack to an image plane.
    pub fn synthesis_kernels(&self) -> Vec<f64> {
        self.filters.clone()
    }

    /// Kernel stack `[K, 1, k, k]` implementing the exact adjoint of synthesis:
    /// each filter flipped in both spatial axes.
    pub fn analysis_kernels(&self) -> Vec<f64> {
        let k = self.kernel_size;
        let mut out = vec![0.0; self.filters.len()];
        for f in 0..self.filter_count {
            let src = self.filter(f);
            let dst = &mut out[f * k * k..(f + 1) * k * k];
            for u in 0..k {
                for v in 0..k {
                    dst[u * k + v] = src[(k - 1 - u) * k + (k - 1 - v)];
                }
            }
        }
        out
    }
}

/// `K` complex feature maps paired with a dictionary and an image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientStack {
    pub filter_count: usize,
    pub height: usize,
    pub width: usize,
    /// `filter_count * height * width` values per plane.
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl CoefficientStack {
    pub fn zeros(filter_count: usize, height: usize, width: usize) -> Self {
        let n = filter_count * height * width;
        Self { filter_count, height, width, re: vec![0.0; n], im: vec![0.0; n] }
    }

    pub fn norm_sq(&self) -> f64 {
        self.re.iter().chain(self.im.iter()).map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.re.iter().zip(&other.re).map(|(a, b)| a * b).sum::<f64>()
            + self.im.iter().zip(&other.im).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.re.iter_mut().chain(self.im.iter_mut()) {
            *v *= c;
        }
    }

    fn check_matches(&self, d: &Dictionary) -> Result<()> {
        if self.filter_count != d.filter_count {
            return Err(Error::FilterCountMismatch {
                expected: d.filter_count,
                actual: self.filter_count,
            });
        }
        Ok(())
    }
}

/// `F^H (m . F x)` on a packed `[2,H,W]` buffer holding (re, im) planes.
/// Self-adjoint for any real field `m`.
pub fn fourier_multiplier_packed(data: &[f64], h: usize, w: usize, mult: &[f64]) -> Vec<f64> {
    let n = h * w;
    debug_assert_eq!(data.len(), 2 * n);
    debug_assert_eq!(mult.len(), n);
    let mut re = data[..n].to_vec();
    let mut im = data[n..].to_vec();
    fft2d_unitary(&mut re, &mut im, h, w, Direction::Forward);
    for i in 0..n {
        re[i] *= mult[i];
        im[i] *= mult[i];
    }
    fft2d_unitary(&mut re, &mut im, h, w, Direction::Inverse);
    let mut out = re;
    out.extend_from_slice(&im);
    out
}

/// Apply a real-valued Fourier-domain multiplier: `F^H (m . F x)`.
/// Self-adjoint for any real field `m`.
pub fn fourier_multiplier(x: &ComplexImage, mult: &[f64]) -> ComplexImage {
    assert_eq!(mult.len(), x.height * x.width, "multiplier length");
    let mut out = x.clone();
    fft2d_unitary(&mut out.re, &mut out.im, x.height, x.width, Direction::Forward);
    for i in 0..mult.len() {
        out.re[i] *= mult[i];
        out.im[i] *= mult[i];
    }
    fft2d_unitary(&mut out.re, &mut out.im, x.height, x.width, Direction::Inverse);
    out
}

/// Forward model `A = S F`: unitary DFT then masking.
pub fn forward_a(x: &ComplexImage, mask: &LowResMask) -> Result<KSpace> {
    if x.height != mask.height || x.width != mask.width {
        return Err(Error::ShapeMismatch {
            context: "forward_a",
            axis: "grid",
            expected: mask.height * mask.width,
            actual: x.height * x.width,
        });
    }
    let mut y = x.clone();
    fft2d_unitary(&mut y.re, &mut y.im, x.height, x.width, Direction::Forward);
    mask.apply(&mut y);
    Ok(y)
}

/// Adjoint `A^H = F^H S`: masking then inverse DFT. With measured data this
/// is the zero-filled reconstruction.
pub fn adjoint_a(y: &KSpace, mask: &LowResMask) -> Result<ComplexImage> {
    if y.height != mask.height || y.width != mask.width {
        return Err(Error::ShapeMismatch {
            context: "adjoint_a",
            axis: "grid",
            expected: mask.height * mask.width,
            actual: y.height * y.width,
        });
    }
    let mut x = y.clone();
    mask.apply(&mut x);
    fft2d_unitary(&mut x.re, &mut x.im, x.height, x.width, Direction::Inverse);
    Ok(x)
}

/// Synthesis `D s = sum_k d_k * s_k`, real filters applied to the re and im
/// planes independently, circular boundary.
pub fn dict_synthesize(s: &CoefficientStack, d: &Dictionary) -> Result<ComplexImage> {
    s.check_matches(d)?;
    let (h, w) = (s.height, s.width);
    let kernels = d.synthesis_kernels();
    let mut out = ComplexImage::zeros(h, w);
    conv2d_forward(&s.re, d.filter_count, h, w, &kernels, 1, d.kernel_size, Padding::Circular, &mut out.re);
    conv2d_forward(&s.im, d.filter_count, h, w, &kernels, 1, d.kernel_size, Padding::Circular, &mut out.im);
    Ok(out)
}

/// Analysis `D^T z`, the exact adjoint of `dict_synthesize`.
pub fn dict_analyze(z: &ComplexImage, d: &Dictionary) -> Result<CoefficientStack> {
    let (h, w) = (z.height, z.width);
    let kernels = d.synthesis_kernels();
    let mut out = CoefficientStack::zeros(d.filter_count, h, w);
    conv2d_backward_input(&z.re, 1, h, w, &kernels, d.filter_count, d.kernel_size, Padding::Circular, &mut out.re);
    conv2d_backward_input(&z.im, 1, h, w, &kernels, d.filter_count, d.kernel_size, Padding::Circular, &mut out.im);
    Ok(out)
}

/// Power-iteration estimate of `||B||^2 = lambda_max(B^H B)` for `B = A D`.
/// Deterministic given `seed`; nondecreasing in `iters`. The start vector
/// replicates one random plane across filters, which makes the estimate
/// equivariant under filter permutations up to rounding.
pub fn operator_norm_sq(
    d: &Dictionary,
    mask: &LowResMask,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    assert!(iters >= 1, "power iteration needs at least one step");
    let (h, w) = (mask.height, mask.width);
    let mut rng = crate::rng::stream(seed, "operator-norm");
    let plane_re: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let plane_im: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut v = CoefficientStack::zeros(d.filter_count, h, w);
    for k in 0..d.filter_count {
        v.re[k * h * w..(k + 1) * h * w].copy_from_slice(&plane_re);
        v.im[k * h * w..(k + 1) * h * w].copy_from_slice(&plane_im);
    }
    let nrm = v.norm_sq().sqrt();
    if nrm == 0.0 {
        return Ok(0.0);
    }
    v.scale(1.0 / nrm);

    let mut lambda = 0.0;
    for _ in 0..iters {
        let bv = forward_a(&dict_synthesize(&v, d)?, mask)?;
        let mut u = dict_analyze(&adjoint_a(&bv, mask)?, d)?;
        lambda = v.dot(&u);
        let unorm = u.norm_sq().sqrt();
        if unorm == 0.0 {
            return Ok(0.0);
        }
        u.scale(1.0 / unorm);
        v = u;
    }
    Ok(lambda)
}

/// Fisher-Yates permutation of `0..n` drawn from a named stream.
pub fn random_permutation(n: usize, seed: u64, name: &str) -> Vec<usize> {
    let mut rng = crate::rng::stream(seed, name);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}
