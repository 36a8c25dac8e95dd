//! Unitary 2D discrete Fourier transform on split re/im planes.
//!
//! Power-of-two lengths go through an iterative radix-2 transform;
//! other lengths use Bluestein's chirp-z reduction to a padded
//! power-of-two convolution. Both directions carry the 1/sqrt(N)
//! unitary factor so forward and inverse are exact adjoints.
//!
//! Image sides must be even and at most 1024. DC sits at index (0,0).

pub const MAX_SIDE: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        }
    }
}

fn assert_side(n: usize) {
    assert!(n >= 2 && n % 2 == 0 && n <= MAX_SIDE, "fft side must be even and in 2..={MAX_SIDE}, got {n}");
}

/// Unitary 2D DFT over row-major planes of shape `h` x `w`, in place.
pub fn fft2d_unitary(re: &mut [f64], im: &mut [f64], h: usize, w: usize, dir: Direction) {
    assert_side(h);
    assert_side(w);
    assert_eq!(re.len(), h * w, "re plane length");
    assert_eq!(im.len(), h * w, "im plane length");

    let mut row_re = vec![0.0; w];
    let mut row_im = vec![0.0; w];
    for y in 0..h {
        row_re.copy_from_slice(&re[y * w..(y + 1) * w]);
        row_im.copy_from_slice(&im[y * w..(y + 1) * w]);
        fft_1d(&mut row_re, &mut row_im, dir);
        re[y * w..(y + 1) * w].copy_from_slice(&row_re);
        im[y * w..(y + 1) * w].copy_from_slice(&row_im);
    }

    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col_re[y] = re[y * w + x];
            col_im[y] = im[y * w + x];
        }
        fft_1d(&mut col_re, &mut col_im, dir);
        for y in 0..h {
            re[y * w + x] = col_re[y];
            im[y * w + x] = col_im[y];
        }
    }

    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in re.iter_mut() {
        *v *= scale;
    }
    for v in im.iter_mut() {
        *v *= scale;
    }
}

/// Unnormalized 1D DFT, in place.
fn fft_1d(re: &mut [f64], im: &mut [f64], dir: Direction) {
    let n = re.len();
    if n.is_power_of_two() {
        fft_radix2(re, im, dir);
    } else {
        fft_bluestein(re, im, dir);
    }
}

fn fft_radix2(re: &mut [f64], im: &mut [f64], dir: Direction) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    let shift = n.leading_zeros() + 1;
    for i in 0..n {
        let j = (i as u64).reverse_bits() >> shift;
        let j = j as usize;
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = dir.sign();
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wsin, wcos) = ang.sin_cos();
        for start in (0..n).step_by(len) {
            let mut wr = 1.0;
            let mut wi = 0.0;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let nwr = wr * wcos - wi * wsin;
                wi = wr * wsin + wi * wcos;
                wr = nwr;
            }
        }
        len <<= 1;
    }
}

/// Chirp-z transform for arbitrary lengths via a padded radix-2 convolution.
fn fft_bluestein(re: &mut [f64], im: &mut [f64], dir: Direction) {
    let n = re.len();
    let sign = dir.sign();
    let m = (2 * n - 1).next_power_of_two();

    // chirp[j] = exp(sign * i * pi * j^2 / n); j^2 taken mod 2n keeps angles small.
    let mut chirp_re = vec![0.0; n];
    let mut chirp_im = vec![0.0; n];
    for j in 0..n {
        let q = ((j as u64 * j as u64) % (2 * n as u64)) as f64;
        let ang = sign * std::f64::consts::PI * q / n as f64;
        chirp_re[j] = ang.cos();
        chirp_im[j] = ang.sin();
    }

    let mut a_re = vec![0.0; m];
    let mut a_im = vec![0.0; m];
    for j in 0..n {
        a_re[j] = re[j] * chirp_re[j] - im[j] * chirp_im[j];
        a_im[j] = re[j] * chirp_im[j] + im[j] * chirp_re[j];
    }

    let mut b_re = vec![0.0; m];
    let mut b_im = vec![0.0; m];
    b_re[0] = chirp_re[0];
    b_im[0] = -chirp_im[0];
    for j in 1..n {
        b_re[j] = chirp_re[j];
        b_im[j] = -chirp_im[j];
        b_re[m - j] = chirp_re[j];
        b_im[m - j] = -chirp_im[j];
    }

    fft_radix2(&mut a_re, &mut a_im, Direction::Forward);
    fft_radix2(&mut b_re, &mut b_im, Direction::Forward);
    for j in 0..m {
        let tr = a_re[j] * b_re[j] - a_im[j] * b_im[j];
        let ti = a_re[j] * b_im[j] + a_im[j] * b_re[j];
        a_re[j] = tr;
        a_im[j] = ti;
    }
    fft_radix2(&mut a_re, &mut a_im, Direction::Inverse);
    let inv_m = 1.0 / m as f64;

    for j in 0..n {
        let yr = a_re[j] * inv_m;
        let yi = a_im[j] * inv_m;
        re[j] = yr * chirp_re[j] - yi * chirp_im[j];
        im[j] = yr * chirp_im[j] + yi * chirp_re[j];
    }
}

/// Signed frequency index of row/column `i` on a grid of `n` samples,
/// in cycles over the field of view; the Nyquist bin maps to n/2.
pub fn signed_freq(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}
