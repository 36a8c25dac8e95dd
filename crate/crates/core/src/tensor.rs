//! Dense f64 tensors and the raw numeric kernels behind the tape ops.
//!
//! The kernels here are plain functions over slices; the autodiff tape,
//! the linear operators, and the dictionary trainer all call into the
//! same routines so tracked and untracked code paths stay bitwise equal.

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must equal product of shape"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Boundary handling for 2D convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Circular,
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

pub(crate) fn check_conv_shapes(
    c_in: usize,
    h: usize,
    w: usize,
    kc_out: usize,
    kc_in: usize,
    k: usize,
) -> Result<()> {
    if kc_in != c_in {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            axis: "in_channels",
            expected: c_in,
            actual: kc_in,
        });
    }
    if k % 2 == 0 {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            axis: "kernel_size (must be odd)",
            expected: k + 1,
            actual: k,
        });
    }
    if h < k || w < k {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            axis: "spatial (must be >= kernel)",
            expected: k,
            actual: h.min(w),
        });
    }
    if kc_out == 0 {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            axis: "out_channels",
            expected: 1,
            actual: 0,
        });
    }
    Ok(())
}

/// "Same"-size cross-correlation with a centered odd kernel.
///
/// input: `[c_in, h, w]`, kernels: `[c_out, c_in, k, k]`, out: `[c_out, h, w]`.
/// `out[o,y,x] = sum_{c,u,v} input[c, y+u-p, x+v-p] * kernels[o,c,u,v]` with
/// `p = (k-1)/2` and the boundary rule from `pad`.
pub fn conv2d_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernels: &[f64],
    c_out: usize,
    k: usize,
    pad: Padding,
    out: &mut [f64],
) {
    debug_assert_eq!(input.len(), c_in * h * w);
    debug_assert_eq!(kernels.len(), c_out * c_in * k * k);
    debug_assert_eq!(out.len(), c_out * h * w);
    let p = (k / 2) as isize;
    out.fill(0.0);
    for o in 0..c_out {
        for c in 0..c_in {
            let ker = &kernels[(o * c_in + c) * k * k..(o * c_in + c + 1) * k * k];
            let plane = &input[c * h * w..(c + 1) * h * w];
            let dst = &mut out[o * h * w..(o + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for u in 0..k {
                        let iy = y as isize + u as isize - p;
                        for v in 0..k {
                            let ix = x as isize + v as isize - p;
                            let val = match pad {
                                Padding::Circular => plane[wrap(iy, h) * w + wrap(ix, w)],
                                Padding::Zero => {
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        0.0
                                    } else {
                                        plane[iy as usize * w + ix as usize]
                                    }
                                }
                            };
                            acc += val * ker[u * k + v];
                        }
                    }
                    dst[y * w + x] += acc;
                }
            }
        }
    }
}

/// Gradient of `conv2d_forward` w.r.t. its input (the exact adjoint map).
pub fn conv2d_backward_input(
    gout: &[f64],
    c_out: usize,
    h: usize,
    w: usize,
    kernels: &[f64],
    c_in: usize,
    k: usize,
    pad: Padding,
    gin: &mut [f64],
) {
    debug_assert_eq!(gout.len(), c_out * h * w);
    debug_assert_eq!(gin.len(), c_in * h * w);
    let p = (k / 2) as isize;
    gin.fill(0.0);
    for o in 0..c_out {
        let gplane = &gout[o * h * w..(o + 1) * h * w];
        for c in 0..c_in {
            let ker = &kernels[(o * c_in + c) * k * k..(o * c_in + c + 1) * k * k];
            let dst = &mut gin[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for u in 0..k {
                        let gy = y as isize - (u as isize - p);
                        for v in 0..k {
                            let gx = x as isize - (v as isize - p);
                            let val = match pad {
                                Padding::Circular => gplane[wrap(gy, h) * w + wrap(gx, w)],
                                Padding::Zero => {
                                    if gy < 0 || gy >= h as isize || gx < 0 || gx >= w as isize {
                                        0.0
                                    } else {
                                        gplane[gy as usize * w + gx as usize]
                                    }
                                }
                            };
                            acc += val * ker[u * k + v];
                        }
                    }
                    dst[y * w + x] += acc;
                }
            }
        }
    }
}

/// Gradient of `conv2d_forward` w.r.t. the kernel stack.
pub fn conv2d_backward_kernels(
    gout: &[f64],
    c_out: usize,
    h: usize,
    w: usize,
    input: &[f64],
    c_in: usize,
    k: usize,
    pad: Padding,
    gker: &mut [f64],
) {
    debug_assert_eq!(gout.len(), c_out * h * w);
    debug_assert_eq!(input.len(), c_in * h * w);
    debug_assert_eq!(gker.len(), c_out * c_in * k * k);
    let p = (k / 2) as isize;
    gker.fill(0.0);
    for o in 0..c_out {
        let gplane = &gout[o * h * w..(o + 1) * h * w];
        for c in 0..c_in {
            let plane = &input[c * h * w..(c + 1) * h * w];
            let dst = &mut gker[(o * c_in + c) * k * k..(o * c_in + c + 1) * k * k];
            for u in 0..k {
                for v in 0..k {
                    let mut acc = 0.0;
                    for y in 0..h {
                        let iy = y as isize + u as isize - p;
                        for x in 0..w {
                            let ix = x as isize + v as isize - p;
                            let val = match pad {
                                Padding::Circular => plane[wrap(iy, h) * w + wrap(ix, w)],
                                Padding::Zero => {
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        0.0
                                    } else {
                                        plane[iy as usize * w + ix as usize]
                                    }
                                }
                            };
                            acc += gplane[y * w + x] * val;
                        }
                    }
                    dst[u * k + v] += acc;
                }
            }
        }
    }
}

/// Overflow-safe softplus, `ln(1 + e^x)`; returns `x` itself past 30.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

#[inline]
pub fn softplus_deriv(x: f64) -> f64 {
    if x > 30.0 {
        1.0
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sign(x) * max(|x| - tau, 0)`.
#[inline]
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

/// Subgradient used for d(soft_threshold)/dx: pass-through strictly
/// outside the dead zone, zero inside and at the kink.
#[inline]
pub fn soft_threshold_deriv_x(x: f64, tau: f64) -> f64 {
    if x.abs() > tau {
        1.0
    } else {
        0.0
    }
}

/// Subgradient used for d(soft_threshold)/dtau.
#[inline]
pub fn soft_threshold_deriv_tau(x: f64, tau: f64) -> f64 {
    if x > tau {
        -1.0
    } else if x < -tau {
        1.0
    } else {
        0.0
    }
}
