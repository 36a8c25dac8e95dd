//! Unrolled accelerated proximal gradient solver for the weighted-l1
//! reconstruction problem
//!
//! ```text
//!   min_s  0.5 || A D s - y' ||^2  +  || Lambda s ||_1
//! ```
//!
//! with per-pixel, per-filter sparsity levels shared between the real and
//! imaginary coefficient planes. The solver runs a fixed number of
//! iterations with Chambolle-Dossal momentum. It can run untracked
//! ([`solve`]), fully on an autodiff tape, or in truncated mode where only
//! the last `t_grad` iterations record gradients ([`solve_on_tape`]);
//! the untracked prefix and the tape path execute the same kernels in the
//! same order, so forward values are bitwise identical across modes.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linops::{
    adjoint_a, dict_synthesize, forward_a, fourier_multiplier_packed, CoefficientStack,
    Dictionary, KSpace, LowResMask,
};
use crate::tape::{Tape, TensorId};
use crate::tensor::{conv2d_forward, soft_threshold, Padding, Tensor};

/// Strictly positive per-filter, per-pixel sparsity level maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityMaps {
    pub filter_count: usize,
    pub height: usize,
    pub width: usize,
    /// `filter_count * height * width` entries, all finite and > 0.
    pub maps: Vec<f64>,
}

impl SparsityMaps {
    pub fn new(filter_count: usize, height: usize, width: usize, maps: Vec<f64>) -> Result<Self> {
        if maps.len() != filter_count * height * width {
            return Err(Error::ShapeMismatch {
                context: "sparsity_maps",
                axis: "entries",
                expected: filter_count * height * width,
                actual: maps.len(),
            });
        }
        if maps.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidSparsityLevel(
                "sparsity maps must be strictly positive and finite".into(),
            ));
        }
        Ok(Self { filter_count, height, width, maps })
    }

    pub fn uniform(filter_count: usize, height: usize, width: usize, level: f64) -> Result<Self> {
        Self::new(filter_count, height, width, vec![level; filter_count * height * width])
    }
}

/// Iteration budget and step/momentum parameters of the solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FistaConfig {
    /// Total unrolled iterations T.
    pub t_total: usize,
    /// Gradient-tracked tail iterations (1..=t_total).
    pub t_grad: usize,
    /// Gradient step, a safety factor over 1/||B||^2.
    pub step: f64,
    /// Chambolle-Dossal momentum parameter, > 2.
    pub momentum_a: f64,
}

impl FistaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_grad == 0 || self.t_grad > self.t_total {
            return Err(Error::InvalidConfig(format!(
                "t_grad must be in 1..=t_total, got {} of {}",
                self.t_grad, self.t_total
            )));
        }
        if !(self.step > 0.0) {
            return Err(Error::InvalidConfig(format!("step must be positive, got {}", self.step)));
        }
        if !(self.momentum_a > 2.0) {
            return Err(Error::InvalidConfig(format!(
                "momentum_a must exceed 2, got {}",
                self.momentum_a
            )));
        }
        Ok(())
    }

    /// Small-problem defaults used throughout the test bench.
    pub fn desk_scale(step: f64) -> Self {
        Self { t_total: 20, t_grad: 8, step, momentum_a: 3.0 }
    }

    /// Full-scale defaults: 64 unrolled iterations, last 28 tracked.
    pub fn paper_scale(step: f64) -> Self {
        Self { t_total: 64, t_grad: 28, step, momentum_a: 3.0 }
    }
}

/// Safety factor applied to the inverse operator-norm estimate.
pub const STEP_SAFETY: f64 = 0.95;
/// Power iterations used when deriving a step size.
pub const STEP_POWER_ITERS: usize = 50;

/// `step = STEP_SAFETY / ||B||^2` for the composite operator of `(d, mask)`.
pub fn step_for(d: &Dictionary, mask: &LowResMask, seed: u64) -> Result<f64> {
    let norm_sq = crate::linops::operator_norm_sq(d, mask, STEP_POWER_ITERS, seed)?;
    if norm_sq <= 0.0 {
        return Err(Error::InvalidConfig("operator norm is zero; cannot derive a step".into()));
    }
    Ok(STEP_SAFETY / norm_sq)
}

/// Proximal map of `step * ||Lambda s||_1`: soft-threshold both planes
/// with per-pixel threshold `step * Lambda_k`.
pub fn weighted_l1_prox(
    s: &CoefficientStack,
    maps: &SparsityMaps,
    step: f64,
) -> Result<CoefficientStack> {
    check_maps_match(s, maps)?;
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("prox step must be positive, got {step}")));
    }
    let mut out = s.clone();
    for i in 0..s.re.len() {
        let tau = maps.maps[i] * step;
        out.re[i] = soft_threshold(s.re[i], tau);
        out.im[i] = soft_threshold(s.im[i], tau);
    }
    Ok(out)
}

/// Composite objective `0.5||A D s - y'||^2 + sum Lambda (|Re s| + |Im s|)`.
pub fn objective(
    s: &CoefficientStack,
    d: &Dictionary,
    mask: &LowResMask,
    y_prime: &KSpace,
    maps: &SparsityMaps,
) -> Result<f64> {
    check_maps_match(s, maps)?;
    let residual = forward_a(&dict_synthesize(s, d)?, mask)?;
    let mut data_term = 0.0;
    for i in 0..residual.re.len() {
        let dr = residual.re[i] - y_prime.re[i];
        let di = residual.im[i] - y_prime.im[i];
        data_term += dr * dr + di * di;
    }
    let mut l1 = 0.0;
    for i in 0..s.re.len() {
        l1 += maps.maps[i] * (s.re[i].abs() + s.im[i].abs());
    }
    Ok(0.5 * data_term + l1)
}

fn check_maps_match(s: &CoefficientStack, maps: &SparsityMaps) -> Result<()> {
    if s.filter_count != maps.filter_count {
        return Err(Error::FilterCountMismatch {
            expected: maps.filter_count,
            actual: s.filter_count,
        });
    }
    if s.height != maps.height || s.width != maps.width {
        return Err(Error::ShapeMismatch {
            context: "sparsity_maps",
            axis: "grid",
            expected: maps.height * maps.width,
            actual: s.height * s.width,
        });
    }
    Ok(())
}

/// Constant pieces of one reconstruction problem shared by the raw loop
/// and the tape loop: dictionary kernels, the binary mask as a Fourier
/// multiplier, and the precomputed data-term constant `D^T A^H y'`.
struct ProblemData {
    filter_count: usize,
    kernel_size: usize,
    height: usize,
    width: usize,
    ker_syn: Vec<f64>,
    ker_ana: Vec<f64>,
    mask_mult: Rc<Vec<f64>>,
    c_re: Vec<f64>,
    c_im: Vec<f64>,
}

impl ProblemData {
    fn new(d: &Dictionary, mask: &LowResMask, y_prime: &KSpace) -> Result<Self> {
        let (h, w) = (mask.height, mask.width);
        if y_prime.height != h || y_prime.width != w {
            return Err(Error::ShapeMismatch {
                context: "fista",
                axis: "grid",
                expected: h * w,
                actual: y_prime.height * y_prime.width,
            });
        }
        let ker_syn = d.synthesis_kernels();
        let ker_ana = d.analysis_kernels();
        let mask_mult: Vec<f64> = mask.keep.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();

        // c = D^T A^H y', via the same analysis convention as the loop
        let x_data = adjoint_a(y_prime, mask)?;
        let k = d.filter_count;
        let mut c_re = vec![0.0; k * h * w];
        let mut c_im = vec![0.0; k * h * w];
        conv2d_forward(&x_data.re, 1, h, w, &ker_ana, k, d.kernel_size, Padding::Circular, &mut c_re);
        conv2d_forward(&x_data.im, 1, h, w, &ker_ana, k, d.kernel_size, Padding::Circular, &mut c_im);

        Ok(Self {
            filter_count: k,
            kernel_size: d.kernel_size,
            height: h,
            width: w,
            ker_syn,
            ker_ana,
            mask_mult: Rc::new(mask_mult),
            c_re,
            c_im,
        })
    }
}

/// Raw (untracked) iteration state.
struct RawState {
    s_re: Vec<f64>,
    s_im: Vec<f64>,
    prev_re: Vec<f64>,
    prev_im: Vec<f64>,
}

/// One raw FISTA iteration; mirrors the tape op sequence exactly.
fn raw_iteration(state: &mut RawState, prob: &ProblemData, tau: &[f64], step: f64, j: usize, momentum_a: f64) {
    let (k, h, w, kf) = (prob.filter_count, prob.height, prob.width, prob.kernel_size);
    let n = h * w;
    let beta = (j as f64 - 1.0) / (j as f64 + momentum_a);

    let mut y_re = vec![0.0; k * n];
    let mut y_im = vec![0.0; k * n];
    for i in 0..k * n {
        y_re[i] = state.s_re[i] + (state.s_re[i] - state.prev_re[i]) * beta;
        y_im[i] = state.s_im[i] + (state.s_im[i] - state.prev_im[i]) * beta;
    }

    // z = D y, packed (re, im); w = F^H S F z
    let mut z2 = vec![0.0; 2 * n];
    {
        let (zr, zi) = z2.split_at_mut(n);
        conv2d_forward(&y_re, k, h, w, &prob.ker_syn, 1, kf, Padding::Circular, zr);
        conv2d_forward(&y_im, k, h, w, &prob.ker_syn, 1, kf, Padding::Circular, zi);
    }
    let w2 = fourier_multiplier_packed(&z2, h, w, &prob.mask_mult);

    // g = D^T w - c
    let mut g_re = vec![0.0; k * n];
    let mut g_im = vec![0.0; k * n];
    conv2d_forward(&w2[..n], 1, h, w, &prob.ker_ana, k, kf, Padding::Circular, &mut g_re);
    conv2d_forward(&w2[n..], 1, h, w, &prob.ker_ana, k, kf, Padding::Circular, &mut g_im);

    for i in 0..k * n {
        let znew_re = y_re[i] - (g_re[i] - prob.c_re[i]) * step;
        let znew_im = y_im[i] - (g_im[i] - prob.c_im[i]) * step;
        state.prev_re[i] = state.s_re[i];
        state.prev_im[i] = state.s_im[i];
        state.s_re[i] = soft_threshold(znew_re, tau[i]);
        state.s_im[i] = soft_threshold(znew_im, tau[i]);
    }
}

fn stack_from(prob_k: usize, h: usize, w: usize, re: Vec<f64>, im: Vec<f64>) -> CoefficientStack {
    CoefficientStack { filter_count: prob_k, height: h, width: w, re, im }
}

fn divergence_check(obj: f64, initial: f64) -> Result<()> {
    if !obj.is_finite() || obj > 10.0 * initial + 1e-12 * (1.0 + initial) {
        return Err(Error::Divergence { objective: obj, initial });
    }
    Ok(())
}

/// Result of an untracked run: the final stack and the objective value
/// trace, `objectives[0]` being the starting point.
pub struct FistaRun {
    pub stack: CoefficientStack,
    pub objectives: Vec<f64>,
}

/// Run `cfg.t_total` untracked iterations from `s0`.
pub fn solve(
    s0: &CoefficientStack,
    mask: &LowResMask,
    d: &Dictionary,
    y_prime: &KSpace,
    maps: &SparsityMaps,
    cfg: &FistaConfig,
) -> Result<FistaRun> {
    cfg.validate()?;
    check_maps_match(s0, maps)?;
    let prob = ProblemData::new(d, mask, y_prime)?;
    let tau: Vec<f64> = maps.maps.iter().map(|&l| l * cfg.step).collect();

    let mut state = RawState {
        s_re: s0.re.clone(),
        s_im: s0.im.clone(),
        prev_re: s0.re.clone(),
        prev_im: s0.im.clone(),
    };
    let initial = objective(s0, d, mask, y_prime, maps)?;
    let mut objectives = vec![initial];
    for j in 1..=cfg.t_total {
        raw_iteration(&mut state, &prob, &tau, cfg.step, j, cfg.momentum_a);
        let s = stack_from(prob.filter_count, prob.height, prob.width, state.s_re.clone(), state.s_im.clone());
        let obj = objective(&s, d, mask, y_prime, maps)?;
        divergence_check(obj, initial)?;
        objectives.push(obj);
    }
    Ok(FistaRun {
        stack: stack_from(prob.filter_count, prob.height, prob.width, state.s_re, state.s_im),
        objectives,
    })
}

/// Gradient tracking policy for [`solve_on_tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackMode {
    /// Every iteration recorded.
    Full,
    /// First `t_total - t_grad` iterations run untracked; only the tail
    /// records gradients.
    Truncated,
}

/// Result of a tape run: final stack ids plus the objective trace.
pub struct TapeFistaRun {
    pub s_re: TensorId,
    pub s_im: TensorId,
    pub objectives: Vec<f64>,
}

/// Constant tape leaves of one reconstruction problem.
pub struct TapeProblem {
    data: ProblemData,
    ker_syn_id: TensorId,
    ker_ana_id: TensorId,
    c_re_id: TensorId,
    c_im_id: TensorId,
}

impl TapeProblem {
    pub fn new(tape: &mut Tape, d: &Dictionary, mask: &LowResMask, y_prime: &KSpace) -> Result<Self> {
        let data = ProblemData::new(d, mask, y_prime)?;
        let (k, kf, h, w) = (data.filter_count, data.kernel_size, data.height, data.width);
        let ker_syn_id = tape.constant(Tensor::new(vec![1, k, kf, kf], data.ker_syn.clone()));
        let ker_ana_id = tape.constant(Tensor::new(vec![k, 1, kf, kf], data.ker_ana.clone()));
        let c_re_id = tape.constant(Tensor::new(vec![k, h, w], data.c_re.clone()));
        let c_im_id = tape.constant(Tensor::new(vec![k, h, w], data.c_im.clone()));
        Ok(Self { data, ker_syn_id, ker_ana_id, c_re_id, c_im_id })
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (self.data.filter_count, self.data.height, self.data.width)
    }
}

/// One tape FISTA iteration; must stay op-for-op parallel to `raw_iteration`.
#[allow(clippy::too_many_arguments)]
fn tape_iteration(
    tape: &mut Tape,
    prob: &TapeProblem,
    tau: TensorId,
    step: f64,
    j: usize,
    momentum_a: f64,
    s: (TensorId, TensorId),
    prev: (TensorId, TensorId),
) -> Result<((TensorId, TensorId), (TensorId, TensorId))> {
    let beta = (j as f64 - 1.0) / (j as f64 + momentum_a);
    let (s_re, s_im) = s;
    let (prev_re, prev_im) = prev;

    let diff_re = tape.sub(s_re, prev_re);
    let sc_re = tape.mul_scalar(diff_re, beta);
    let y_re = tape.add(s_re, sc_re);
    let diff_im = tape.sub(s_im, prev_im);
    let sc_im = tape.mul_scalar(diff_im, beta);
    let y_im = tape.add(s_im, sc_im);

    let z_re = tape.conv2d(y_re, prob.ker_syn_id, Padding::Circular)?;
    let z_im = tape.conv2d(y_im, prob.ker_syn_id, Padding::Circular)?;
    let z2 = tape.concat_channels(&[z_re, z_im]);
    let w2 = tape.fourier_multiplier(z2, prob.data.mask_mult.clone());
    let w_re = tape.slice_channels(w2, 0, 1);
    let w_im = tape.slice_channels(w2, 1, 1);

    let ga_re = tape.conv2d(w_re, prob.ker_ana_id, Padding::Circular)?;
    let ga_im = tape.conv2d(w_im, prob.ker_ana_id, Padding::Circular)?;
    let g_re = tape.sub(ga_re, prob.c_re_id);
    let g_im = tape.sub(ga_im, prob.c_im_id);

    let sg_re = tape.mul_scalar(g_re, step);
    let znew_re = tape.sub(y_re, sg_re);
    let sg_im = tape.mul_scalar(g_im, step);
    let znew_im = tape.sub(y_im, sg_im);

    let next_re = tape.soft_threshold(znew_re, tau)?;
    let next_im = tape.soft_threshold(znew_im, tau)?;
    Ok(((next_re, next_im), (s_re, s_im)))
}

/// Unroll the solver on `tape` starting from `s = 0`, with the sparsity
/// maps given as a (possibly gradient-tracked) `[K,H,W]` tensor.
pub fn solve_on_tape(
    tape: &mut Tape,
    prob: &TapeProblem,
    d: &Dictionary,
    mask: &LowResMask,
    y_prime: &KSpace,
    lambda: TensorId,
    cfg: &FistaConfig,
    mode: TrackMode,
) -> Result<TapeFistaRun> {
    cfg.validate()?;
    let (k, h, w) = prob.grid();
    if tape.shape(lambda) != [k, h, w] {
        return Err(Error::ShapeMismatch {
            context: "solve_on_tape",
            axis: "lambda maps",
            expected: k * h * w,
            actual: tape.value(lambda).numel(),
        });
    }
    let maps = SparsityMaps::new(k, h, w, tape.value(lambda).data.clone())?;
    let s0 = CoefficientStack::zeros(k, h, w);
    let initial = objective(&s0, d, mask, y_prime, &maps)?;
    let mut objectives = vec![initial];

    let untracked = match mode {
        TrackMode::Full => 0,
        TrackMode::Truncated => cfg.t_total - cfg.t_grad,
    };

    // untracked prefix on raw buffers
    let tau_raw: Vec<f64> = maps.maps.iter().map(|&l| l * cfg.step).collect();
    let mut state = RawState {
        s_re: vec![0.0; k * h * w],
        s_im: vec![0.0; k * h * w],
        prev_re: vec![0.0; k * h * w],
        prev_im: vec![0.0; k * h * w],
    };
    for j in 1..=untracked {
        raw_iteration(&mut state, &prob.data, &tau_raw, cfg.step, j, cfg.momentum_a);
        let s = stack_from(k, h, w, state.s_re.clone(), state.s_im.clone());
        let obj = objective(&s, d, mask, y_prime, &maps)?;
        divergence_check(obj, initial)?;
        objectives.push(obj);
    }

    // tracked tail
    let tau = tape.mul_scalar(lambda, cfg.step);
    let mut s = (
        tape.constant(Tensor::new(vec![k, h, w], state.s_re.clone())),
        tape.constant(Tensor::new(vec![k, h, w], state.s_im.clone())),
    );
    let mut prev = (
        tape.constant(Tensor::new(vec![k, h, w], state.prev_re.clone())),
        tape.constant(Tensor::new(vec![k, h, w], state.prev_im.clone())),
    );
    for j in untracked + 1..=cfg.t_total {
        let (next, new_prev) = tape_iteration(tape, prob, tau, cfg.step, j, cfg.momentum_a, s, prev)?;
        s = next;
        prev = new_prev;
        let stack = stack_from(k, h, w, tape.value(s.0).data.clone(), tape.value(s.1).data.clone());
        let obj = objective(&stack, d, mask, y_prime, &maps)?;
        divergence_check(obj, initial)?;
        objectives.push(obj);
    }

    Ok(TapeFistaRun { s_re: s.0, s_im: s.1, objectives })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::DictionaryMeta;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_dictionary(k: usize, kf: usize, seed: u64) -> Dictionary {
        let mut rng = crate::rng::stream(seed, "fista-dict");
        let mut filters: Vec<f64> = (0..k * kf * kf).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for f in 0..k {
            let n = kf * kf;
            let norm = filters[f * n..(f + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut filters[f * n..(f + 1) * n] {
                *v /= norm;
            }
        }
        Dictionary::new(
            k,
            kf,
            filters,
            DictionaryMeta { beta: 0.25, lambda: 0.1, corpus: "test".into(), created: String::new() },
        )
        .unwrap()
    }

    fn random_kspace(h: usize, w: usize, mask: &LowResMask, seed: u64) -> KSpace {
        let mut rng = crate::rng::stream(seed, "fista-ksp");
        let mut y = KSpace::zeros(h, w);
        for i in 0..h * w {
            if mask.keep[i] {
                y.re[i] = rng.gen_range(-1.0..1.0);
                y.im[i] = rng.gen_range(-1.0..1.0);
            }
        }
        y
    }

    #[test]
    fn prox_limits() {
        let mut s = CoefficientStack::zeros(2, 4, 4);
        let mut rng = crate::rng::stream(1, "prox");
        for v in s.re.iter_mut().chain(s.im.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        // vanishing levels: identity
        let tiny = SparsityMaps::uniform(2, 4, 4, 1e-300).unwrap();
        let out = weighted_l1_prox(&s, &tiny, 1.0).unwrap();
        for i in 0..s.re.len() {
            assert_relative_eq!(out.re[i], s.re[i], epsilon = 1e-12);
        }
        // huge levels: zero
        let huge = SparsityMaps::uniform(2, 4, 4, 1e9).unwrap();
        let out = weighted_l1_prox(&s, &huge, 1.0).unwrap();
        assert!(out.norm_sq() == 0.0);
    }

    #[test]
    fn prox_matches_scalar_grid_search() {
        // coarse-to-fine scan of 0.5(z-x)^2 + tau|z|, step 1e-6 at the fine stage
        let mut rng = crate::rng::stream(2, "prox-grid");
        for _ in 0..50 {
            let x: f64 = rng.gen_range(-2.0..2.0);
            let lambda: f64 = rng.gen_range(0.01..1.5);
            let step: f64 = rng.gen_range(0.1..2.0);
            let tau = lambda * step;

            let scan = |lo: f64, hi: f64, n: usize| -> f64 {
                let mut best = lo;
                let mut best_f = f64::INFINITY;
                for i in 0..=n {
                    let z = lo + (hi - lo) * i as f64 / n as f64;
                    let f = 0.5 * (z - x) * (z - x) + tau * z.abs();
                    if f < best_f {
                        best_f = f;
                        best = z;
                    }
                }
                best
            };
            let coarse = scan(-3.0, 3.0, 6000); // 1e-3 grid
            let fine = scan(coarse - 2e-3, coarse + 2e-3, 4000); // 1e-6 grid

            let mut s = CoefficientStack::zeros(1, 2, 2);
            s.re[0] = x;
            let maps = SparsityMaps::uniform(1, 2, 2, lambda).unwrap();
            let out = weighted_l1_prox(&s, &maps, step).unwrap();
            assert!(
                (out.re[0] - fine).abs() < 1e-5,
                "x={x} tau={tau}: prox {} vs grid {fine}",
                out.re[0]
            );
        }
    }

    #[test]
    fn prox_rejects_nonpositive_levels() {
        assert!(SparsityMaps::uniform(1, 2, 2, 0.0).is_err());
        assert!(SparsityMaps::uniform(1, 2, 2, -1.0).is_err());
        assert!(SparsityMaps::new(1, 2, 2, vec![1.0, 1.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn objective_trivial_values() {
        let d = random_dictionary(2, 3, 3);
        let mask = LowResMask::all_pass(8, 8);
        let y = random_kspace(8, 8, &mask, 4);
        let s0 = CoefficientStack::zeros(2, 8, 8);
        let maps = SparsityMaps::uniform(2, 8, 8, 0.3).unwrap();
        let obj = objective(&s0, &d, &mask, &y, &maps).unwrap();
        assert_relative_eq!(obj, 0.5 * y.norm_sq(), max_relative = 1e-12);
    }

    #[test]
    fn objective_matches_independent_recomposition() {
        let d = random_dictionary(2, 3, 5);
        let mask = LowResMask::centered(8, 8, 4, 4);
        let y = random_kspace(8, 8, &mask, 6);
        let maps = SparsityMaps::uniform(2, 8, 8, 0.15).unwrap();
        let mut s = CoefficientStack::zeros(2, 8, 8);
        let mut rng = crate::rng::stream(7, "obj");
        for v in s.re.iter_mut().chain(s.im.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let obj = objective(&s, &d, &mask, &y, &maps).unwrap();

        // rebuild from raw operators
        let bs = forward_a(&dict_synthesize(&s, &d).unwrap(), &mask).unwrap();
        let mut dt = 0.0;
        for i in 0..64 {
            dt += (bs.re[i] - y.re[i]).powi(2) + (bs.im[i] - y.im[i]).powi(2);
        }
        let l1: f64 = s
            .re
            .iter()
            .zip(&s.im)
            .zip(&maps.maps)
            .map(|((r, i), l)| l * (r.abs() + i.abs()))
            .sum();
        assert_relative_eq!(obj, 0.5 * dt + l1, max_relative = 1e-10);
    }

    #[test]
    fn solve_with_huge_levels_and_zero_data_returns_zero() {
        let d = random_dictionary(2, 3, 8);
        let mask = LowResMask::centered(8, 8, 4, 4);
        let y = KSpace::zeros(8, 8);
        let maps = SparsityMaps::uniform(2, 8, 8, 1e6).unwrap();
        let cfg = FistaConfig { t_total: 10, t_grad: 10, step: 0.5, momentum_a: 3.0 };
        let run = solve(&CoefficientStack::zeros(2, 8, 8), &mask, &d, &y, &maps, &cfg).unwrap();
        assert_eq!(run.stack.norm_sq(), 0.0);
        assert!(run.objectives.iter().all(|&o| o == 0.0));
    }

    #[test]
    fn separable_instance_matches_closed_form() {
        // K=1 delta filter + all-pass mask make B unitary, so the minimizer
        // is an elementwise soft-threshold of A^H y'.
        let d = Dictionary::delta(3);
        let mask = LowResMask::all_pass(8, 8);
        let y = random_kspace(8, 8, &mask, 9);
        let lambda = 0.2;
        let maps = SparsityMaps::uniform(1, 8, 8, lambda).unwrap();
        let cfg = FistaConfig { t_total: 200, t_grad: 1, step: 0.95, momentum_a: 3.0 };
        let run = solve(&CoefficientStack::zeros(1, 8, 8), &mask, &d, &y, &maps, &cfg).unwrap();

        let x = adjoint_a(&y, &mask).unwrap();
        for i in 0..64 {
            assert!((run.stack.re[i] - soft_threshold(x.re[i], lambda)).abs() < 1e-6);
            assert!((run.stack.im[i] - soft_threshold(x.im[i], lambda)).abs() < 1e-6);
        }
    }

    #[test]
    fn convergence_rate_is_quadratic_on_separable_instance() {
        let d = Dictionary::delta(3);
        let mask = LowResMask::all_pass(8, 8);
        let y = random_kspace(8, 8, &mask, 10);
        let lambda = 0.2;
        let maps = SparsityMaps::uniform(1, 8, 8, lambda).unwrap();
        // step below 1/L, otherwise the unitary instance converges in one hop
        let cfg = FistaConfig { t_total: 200, t_grad: 1, step: 0.3, momentum_a: 3.0 };
        let run = solve(&CoefficientStack::zeros(1, 8, 8), &mask, &d, &y, &maps, &cfg).unwrap();

        let x = adjoint_a(&y, &mask).unwrap();
        let mut star = CoefficientStack::zeros(1, 8, 8);
        for i in 0..64 {
            star.re[i] = soft_threshold(x.re[i], lambda);
            star.im[i] = soft_threshold(x.im[i], lambda);
        }
        let opt = objective(&star, &d, &mask, &y, &maps).unwrap();

        // c fitted on early iterations must bound the whole tail
        let gap = |j: usize| (run.objectives[j] - opt).max(0.0);
        let c_early = (3..=20).map(|j| gap(j) * (j * j) as f64).fold(0.0_f64, f64::max);
        assert!(c_early.is_finite() && c_early > 0.0);
        for j in 21..=200 {
            assert!(
                gap(j) <= 1.05 * c_early / (j * j) as f64 + 1e-14,
                "gap at {j} = {} exceeds c/j^2 = {}",
                gap(j),
                c_early / (j * j) as f64
            );
        }
    }

    #[test]
    fn endpoint_objective_never_exceeds_start_with_safe_step() {
        let d = random_dictionary(2, 3, 11);
        let mask = LowResMask::centered(8, 8, 4, 4);
        let y = random_kspace(8, 8, &mask, 12);
        let maps = SparsityMaps::uniform(2, 8, 8, 0.05).unwrap();
        let step = step_for(&d, &mask, 13).unwrap();
        let cfg = FistaConfig { t_total: 30, t_grad: 1, step, momentum_a: 3.0 };
        let run = solve(&CoefficientStack::zeros(2, 8, 8), &mask, &d, &y, &maps, &cfg).unwrap();
        let best = run.objectives.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(run.objectives[30] <= run.objectives[0] + 1e-12);
        assert!(best <= run.objectives[0]);
    }

    #[test]
    fn long_run_ista_oracle_agrees_on_random_instance() {
        // independent reference: plain proximal gradient (no momentum) built
        // from the public operators, run far past convergence.
        let d = random_dictionary(2, 3, 14);
        let mask = LowResMask::centered(8, 8, 4, 4);
        let y = random_kspace(8, 8, &mask, 15);
        let maps = SparsityMaps::uniform(2, 8, 8, 0.15).unwrap();
        let step = step_for(&d, &mask, 16).unwrap();

        let mut s = CoefficientStack::zeros(2, 8, 8);
        for _ in 0..100_000 {
            let bs = forward_a(&dict_synthesize(&s, &d).unwrap(), &mask).unwrap();
            let mut r = bs.clone();
            for i in 0..64 {
                r.re[i] -= y.re[i];
                r.im[i] -= y.im[i];
            }
            let g = crate::linops::dict_analyze(&adjoint_a(&r, &mask).unwrap(), &d).unwrap();
            for i in 0..s.re.len() {
                s.re[i] -= step * g.re[i];
                s.im[i] -= step * g.im[i];
            }
            s = weighted_l1_prox(&s, &maps, step).unwrap();
        }
        let ista_obj = objective(&s, &d, &mask, &y, &maps).unwrap();

        let cfg = FistaConfig { t_total: 500, t_grad: 1, step, momentum_a: 3.0 };
        let run = solve(&CoefficientStack::zeros(2, 8, 8), &mask, &d, &y, &maps, &cfg).unwrap();
        assert!(
            (run.objectives[500] - ista_obj).abs() < 1e-6,
            "fista {} vs ista {}",
            run.objectives[500],
            ista_obj
        );
    }

    #[test]
    fn fixed_point_barely_moves() {
        // the separable closed form is an exact fixed point; one more
        // iteration must stay within 1e-9
        let d = Dictionary::delta(3);
        let mask = LowResMask::all_pass(8, 8);
        let y = random_kspace(8, 8, &mask, 17);
        let lambda = 0.2;
        let maps = SparsityMaps::uniform(1, 8, 8, lambda).unwrap();
        let x = adjoint_a(&y, &mask).unwrap();
        let mut star = CoefficientStack::zeros(1, 8, 8);
        for i in 0..64 {
            star.re[i] = soft_threshold(x.re[i], lambda);
            star.im[i] = soft_threshold(x.im[i], lambda);
        }
        let cfg = FistaConfig { t_total: 1, t_grad: 1, step: 1.0, momentum_a: 3.0 };
        let run = solve(&star, &mask, &d, &y, &maps, &cfg).unwrap();
        let mut moved = 0.0f64;
        for i in 0..64 {
            moved = moved.max((run.stack.re[i] - star.re[i]).abs());
            moved = moved.max((run.stack.im[i] - star.im[i]).abs());
        }
        assert!(moved < 1e-9, "fixed point moved by {moved}");
    }

    #[test]
    fn oversized_step_triggers_divergence_error() {
        let d = random_dictionary(2, 3, 18);
        let mask = LowResMask::all_pass(8, 8);
        let y = random_kspace(8, 8, &mask, 19);
        let maps = SparsityMaps::uniform(2, 8, 8, 1e-6).unwrap();
        let cfg = FistaConfig { t_total: 400, t_grad: 1, step: 50.0, momentum_a: 3.0 };
        match solve(&CoefficientStack::zeros(2, 8, 8), &mask, &d, &y, &maps, &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got objectives {:?}", other.map(|r| r.objectives[400])),
        }
    }

    #[test]
    fn config_validation_rejects_bad_parameters() {
        assert!(FistaConfig { t_total: 10, t_grad: 0, step: 1.0, momentum_a: 3.0 }.validate().is_err());
        assert!(FistaConfig { t_total: 10, t_grad: 11, step: 1.0, momentum_a: 3.0 }.validate().is_err());
        assert!(FistaConfig { t_total: 10, t_grad: 5, step: 0.0, momentum_a: 3.0 }.validate().is_err());
        assert!(FistaConfig { t_total: 10, t_grad: 5, step: 1.0, momentum_a: 2.0 }.validate().is_err());
        assert!(FistaConfig::desk_scale(0.5).validate().is_ok());
        let paper = FistaConfig::paper_scale(0.5);
        assert_eq!((paper.t_total, paper.t_grad), (64, 28));
    }

    #[test]
    fn tape_forward_is_bitwise_equal_to_raw_solver() {
        let d = random_dictionary(2, 3, 20);
        let mask = LowResMask::centered(8, 8, 4, 4);
        let y = random_kspace(8, 8, &mask, 21);
        let step = step_for(&d, &mask, 22).unwrap();
        let cfg = FistaConfig { t_total: 12, t_grad: 5, step, momentum_a: 3.0 };

        let mut rng = crate::rng::stream(23, "maps");
        let maps_vec: Vec<f64> = (0..2 * 64).map(|_| rng.gen_range(0.01..0.3)).collect();
        let maps = SparsityMaps::new(2, 8, 8, maps_vec.clone()).unwrap();

        let raw = solve(&CoefficientStack::zeros(2, 8, 8), &mask, &d, &y, &maps, &cfg).unwrap();

        for mode in [TrackMode::Full, TrackMode::Truncated] {
            let mut tape = Tape::new();
            let prob = TapeProblem::new(&mut tape, &d, &mask, &y).unwrap();
            let lam = tape.constant(Tensor::new(vec![2, 8, 8], maps_vec.clone()));
            let run = solve_on_tape(&mut tape, &prob, &d, &mask, &y, lam, &cfg, mode).unwrap();
            assert_eq!(tape.value(run.s_re).data, raw.stack.re, "re planes differ in {mode:?}");
            assert_eq!(tape.value(run.s_im).data, raw.stack.im, "im planes differ in {mode:?}");
            assert_eq!(run.objectives, raw.objectives, "objective traces differ in {mode:?}");
        }
    }

    #[test]
    fn truncated_mode_still_reaches_lambda_gradients() {
        let d = random_dictionary(2, 3, 24);
        let mask = LowResMask::centered(8, 8, 4, 4);
        let y = random_kspace(8, 8, &mask, 25);
        let step = step_for(&d, &mask, 26).unwrap();
        let cfg = FistaConfig { t_total: 8, t_grad: 3, step, momentum_a: 3.0 };

        let mut tape = Tape::new();
        let prob = TapeProblem::new(&mut tape, &d, &mask, &y).unwrap();
        let lam = tape.param(Tensor::new(vec![2, 8, 8], vec![0.05; 128]));
        let run = solve_on_tape(&mut tape, &prob, &d, &mask, &y, lam, &cfg, TrackMode::Truncated).unwrap();
        let sq_re = tape.mul(run.s_re, run.s_re);
        let sq_im = tape.mul(run.s_im, run.s_im);
        let tot = tape.add(sq_re, sq_im);
        let loss = tape.sum_all(tot);
        tape.backward(loss).unwrap();
        let g = tape.grad(lam).expect("lambda gradient missing");
        assert!(g.iter().any(|&v| v != 0.0), "lambda gradient is identically zero");
    }
}
