//! End-to-end reconstruction and training.
//!
//! One reconstruction is: zero-filled adjoint, closed-form low/high split,
//! sparsity-map estimation, unrolled solve of the residual problem from
//! `s = 0`, then synthesis plus the low-pass part. Training minimizes the
//! complex MSE against ground truth over (data, dictionary) pairs, rotating
//! dictionaries so one estimator sees many reconstruction problems, and
//! backpropagates through the tracked tail of the solver only.

use rand::Rng;

use crate::dictlearn::DictionaryBank;
use crate::error::{Error, Result};
use crate::estimator::MapEstimator;
use crate::fista::{self, FistaConfig, TrackMode};
use crate::highpass::{residual_data, split, HighpassConfig};
use crate::io::MetricRow;
use crate::linops::{adjoint_a, dict_synthesize, ComplexImage, Dictionary, KSpace, LowResMask};
use crate::metrics;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Padding, Tensor};

/// Reconstruction-time parameters shared across dictionaries. The solver
/// step is derived per dictionary from a power-iteration estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    /// Fallback split weight when `beta_from_dict` is false or metadata
    /// carries no usable value.
    pub highpass: HighpassConfig,
    /// Pair each dictionary with the beta it was pretrained under.
    pub beta_from_dict: bool,
    pub t_total: usize,
    pub t_grad: usize,
    pub momentum_a: f64,
    /// Seed of the power-iteration stream behind the step estimate.
    pub step_seed: u64,
}

impl ReconConfig {
    pub fn desk_scale() -> Self {
        Self {
            highpass: HighpassConfig::default(),
            beta_from_dict: true,
            t_total: 20,
            t_grad: 8,
            momentum_a: 3.0,
            step_seed: 0,
        }
    }

    /// Full-scale iteration budget: 64 unrolled, last 28 tracked.
    pub fn paper_scale() -> Self {
        Self { t_total: 64, t_grad: 28, ..Self::desk_scale() }
    }

    fn beta_for(&self, d: &Dictionary) -> f64 {
        if self.beta_from_dict && d.meta.beta > 0.0 {
            d.meta.beta
        } else {
            self.highpass.beta
        }
    }

    fn fista_for(&self, d: &Dictionary, mask: &LowResMask) -> Result<FistaConfig> {
        let step = fista::step_for(d, mask, self.step_seed)?;
        let cfg = FistaConfig {
            t_total: self.t_total,
            t_grad: self.t_grad,
            step,
            momentum_a: self.momentum_a,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Raw-data/target pair of one training or evaluation sample.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub y: KSpace,
    pub x_true: ComplexImage,
}

/// Dictionary selection policy during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DictPolicy {
    /// Deterministic rotation through the subset.
    RoundRobin,
    /// Seeded draw per sample.
    SeededRandom,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the network parameters.
    pub lr_net: f64,
    /// Learning rate of the global scalar `t`.
    pub lr_scalars: f64,
    pub seed: u64,
    /// Bank keys used during training; rotated per sample.
    pub bank_subset: Vec<String>,
    pub dict_policy: DictPolicy,
    /// Calibrate `t` once against the first sample's coefficient scale so
    /// the solver starts active; without it a fresh estimator can sit in
    /// the all-thresholded regime where no gradient flows at all.
    pub auto_scale_t: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64, bank_subset: Vec<String>) -> Self {
        Self {
            epochs,
            batch_size: 1,
            lr_net: 1e-4,
            lr_scalars: 1e-2,
            seed,
            bank_subset,
            dict_policy: DictPolicy::RoundRobin,
            auto_scale_t: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr_net > 0.0) || !(self.lr_scalars > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.bank_subset.is_empty() {
            return Err(Error::InvalidConfig("bank_subset must not be empty".into()));
        }
        Ok(())
    }
}

/// Floor applied to `t` after every optimizer step.
const T_FLOOR: f64 = 1e-6;

/// Quantile of the initial coefficient magnitudes that the calibrated
/// thresholds start at.
const SCALE_QUANTILE: f64 = 0.8;

/// Set `t` so the initial thresholds sit at [`SCALE_QUANTILE`] of the
/// coefficient magnitudes `D^T A^H y'` of one reference sample.
pub fn calibrate_scale(
    est: &mut MapEstimator,
    sample: &TrainSample,
    mask: &LowResMask,
    d: &Dictionary,
    cfg: &ReconConfig,
) -> Result<()> {
    let x0 = adjoint_a(&sample.y, mask)?;
    let (x_low, _) = split(&x0, &HighpassConfig { beta: cfg.beta_for(d) })?;
    let y_prime = residual_data(&sample.y, &x_low, mask)?;
    let coeffs = crate::linops::dict_analyze(&adjoint_a(&y_prime, mask)?, d)?;
    let mut mags: Vec<f64> = coeffs.re.iter().chain(coeffs.im.iter()).map(|v| v.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = mags[((mags.len() - 1) as f64 * SCALE_QUANTILE) as usize];

    let maps = est.estimate(&x0, d)?;
    let mean_phi = maps.maps.iter().sum::<f64>() / maps.maps.len() as f64 / est.t;
    if mean_phi > 0.0 {
        est.t = (q / mean_phi).max(T_FLOOR);
    }
    Ok(())
}

/// Untracked end-to-end reconstruction.
pub fn reconstruct(
    y: &KSpace,
    mask: &LowResMask,
    d: &Dictionary,
    est: &MapEstimator,
    cfg: &ReconConfig,
) -> Result<ComplexImage> {
    let x0 = adjoint_a(y, mask)?;
    let (x_low, _) = split(&x0, &HighpassConfig { beta: cfg.beta_for(d) })?;
    let y_prime = residual_data(y, &x_low, mask)?;
    let maps = est.estimate(&x0, d)?;
    let fcfg = cfg.fista_for(d, mask)?;
    let run = fista::solve(
        &crate::linops::CoefficientStack::zeros(d.filter_count, x0.height, x0.width),
        mask,
        d,
        &y_prime,
        &maps,
        &fcfg,
    )?;
    let mut out = dict_synthesize(&run.stack, d)?;
    for i in 0..out.re.len() {
        out.re[i] += x_low.re[i];
        out.im[i] += x_low.im[i];
    }
    Ok(out)
}

/// Tape outputs of one tracked reconstruction.
pub struct TapeRecon {
    pub xhat_re: TensorId,
    pub xhat_im: TensorId,
}

/// Tracked reconstruction on an existing tape with pushed estimator
/// parameters. Forward values are bitwise identical to [`reconstruct`].
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_on_tape(
    tape: &mut Tape,
    params: &crate::estimator::TapeEstimator,
    est: &MapEstimator,
    y: &KSpace,
    mask: &LowResMask,
    d: &Dictionary,
    cfg: &ReconConfig,
    mode: TrackMode,
) -> Result<TapeRecon> {
    let x0 = adjoint_a(y, mask)?;
    let (x_low, _) = split(&x0, &HighpassConfig { beta: cfg.beta_for(d) })?;
    let y_prime = residual_data(y, &x_low, mask)?;
    let lambda = est.estimate_on_tape(tape, params, &x0, d)?;
    let fcfg = cfg.fista_for(d, mask)?;

    let prob = fista::TapeProblem::new(tape, d, mask, &y_prime)?;
    let run = fista::solve_on_tape(tape, &prob, d, mask, &y_prime, lambda, &fcfg, mode)?;

    let (h, w) = (x0.height, x0.width);
    let ker_syn = tape.constant(Tensor::new(
        vec![1, d.filter_count, d.kernel_size, d.kernel_size],
        d.synthesis_kernels(),
    ));
    let z_re = tape.conv2d(run.s_re, ker_syn, Padding::Circular)?;
    let z_im = tape.conv2d(run.s_im, ker_syn, Padding::Circular)?;
    let xlow_re = tape.constant(Tensor::new(vec![1, h, w], x_low.re.clone()));
    let xlow_im = tape.constant(Tensor::new(vec![1, h, w], x_low.im.clone()));
    let xhat_re = tape.add(z_re, xlow_re);
    let xhat_im = tape.add(z_im, xlow_im);
    Ok(TapeRecon { xhat_re, xhat_im })
}

/// Per-pixel complex MSE between the tape reconstruction and a target.
fn mse_loss_on_tape(tape: &mut Tape, recon: &TapeRecon, target: &ComplexImage) -> TensorId {
    let (h, w) = (target.height, target.width);
    let t_re = tape.constant(Tensor::new(vec![1, h, w], target.re.clone()));
    let t_im = tape.constant(Tensor::new(vec![1, h, w], target.im.clone()));
    let d_re = tape.sub(recon.xhat_re, t_re);
    let d_im = tape.sub(recon.xhat_im, t_im);
    let sq_re = tape.mul(d_re, d_re);
    let sq_im = tape.mul(d_im, d_im);
    let s_re = tape.sum_all(sq_re);
    let s_im = tape.sum_all(sq_im);
    let total = tape.add(s_re, s_im);
    tape.mul_scalar(total, 1.0 / (h * w) as f64)
}

/// Adam moment buffers over one flattened parameter group.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], steps: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

fn select_dictionary<'b>(
    bank: &'b DictionaryBank,
    tc: &TrainConfig,
    sample_counter: usize,
    rng: &mut impl Rng,
) -> Result<(&'b Dictionary, String)> {
    let key = match tc.dict_policy {
        DictPolicy::RoundRobin => tc.bank_subset[sample_counter % tc.bank_subset.len()].clone(),
        DictPolicy::SeededRandom => tc.bank_subset[rng.gen_range(0..tc.bank_subset.len())].clone(),
    };
    let entry = bank
        .get(&key)
        .ok_or_else(|| Error::InvalidConfig(format!("bank has no entry `{key}`")))?;
    Ok((&entry.dictionary, key))
}

/// Train the estimator; returns it with the per-epoch mean loss trace.
pub fn train(
    samples: &[TrainSample],
    mask: &LowResMask,
    bank: &DictionaryBank,
    mut est: MapEstimator,
    rc: &ReconConfig,
    tc: &TrainConfig,
) -> Result<(MapEstimator, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    tc.validate()?;

    if tc.auto_scale_t && tc.epochs > 0 {
        let first = bank
            .get(&tc.bank_subset[0])
            .ok_or_else(|| Error::InvalidConfig(format!("bank has no entry `{}`", tc.bank_subset[0])))?;
        calibrate_scale(&mut est, &samples[0], mask, &first.dictionary, rc)?;
    }

    let net_len = est.unet.param_count();
    let mut adam_net = AdamState::new(net_len);
    let mut adam_t = AdamState::new(1);
    let mut policy_rng = crate::rng::stream(tc.seed, "train/dict-policy");

    let mut trace = Vec::with_capacity(tc.epochs);
    let mut sample_counter = 0usize;
    for epoch in 0..tc.epochs {
        let mut epoch_loss = 0.0;
        let mut grad_net = vec![0.0; net_len];
        let mut grad_t = 0.0;
        let mut in_batch = 0usize;

        for (idx, sample) in samples.iter().enumerate() {
            let (d, dict_key) = select_dictionary(bank, tc, sample_counter, &mut policy_rng)?;
            sample_counter += 1;

            let mut tape = Tape::new();
            let params = est.push_params(&mut tape, true);
            let recon =
                reconstruct_on_tape(&mut tape, &params, &est, &sample.y, mask, d, rc, TrackMode::Truncated)?;
            let loss_id = mse_loss_on_tape(&mut tape, &recon, &sample.x_true);
            let loss = tape.value(loss_id).data[0];
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, sample: idx, dict_key });
            }
            epoch_loss += loss;
            tape.backward(loss_id)?;

            let mut offset = 0;
            for (w_id, b_id) in &params.unet.layers {
                for &g in tape.grad(*w_id).unwrap_or(&[]) {
                    grad_net[offset] += g;
                    offset += 1;
                }
                for &g in tape.grad(*b_id).unwrap_or(&[]) {
                    grad_net[offset] += g;
                    offset += 1;
                }
            }
            grad_t += tape.grad(params.t).map(|g| g[0]).unwrap_or(0.0);
            in_batch += 1;

            if in_batch == tc.batch_size || idx + 1 == samples.len() {
                let scale = 1.0 / in_batch as f64;
                for g in grad_net.iter_mut() {
                    *g *= scale;
                }
                let mut net_flat = est.unet.flatten_params();
                adam_net.step(&mut net_flat, &grad_net, tc.lr_net);
                est.unet.set_params(&net_flat)?;

                let mut t_param = [est.t];
                adam_t.step(&mut t_param, &[grad_t * scale], tc.lr_scalars);
                est.t = t_param[0].max(T_FLOOR);

                grad_net.fill(0.0);
                grad_t = 0.0;
                in_batch = 0;
            }
        }
        trace.push(epoch_loss / samples.len() as f64);
    }
    Ok((est, trace))
}

/// Reconstruct and score every sample against its target with one fixed
/// dictionary. Row ids are the sample indices.
pub fn evaluate(
    samples: &[TrainSample],
    mask: &LowResMask,
    d: &Dictionary,
    dict_key: &str,
    est: &MapEstimator,
    rc: &ReconConfig,
    mask_threshold_frac: f64,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(samples.len());
    for (idx, sample) in samples.iter().enumerate() {
        let xhat = reconstruct(&sample.y, mask, d, est, rc)?;
        let eval_mask = metrics::eval_mask_from(&sample.x_true, mask_threshold_frac)?;
        rows.push(MetricRow {
            sample_id: format!("{idx:04}"),
            dict_key: dict_key.to_string(),
            mse: metrics::mse(&xhat, &sample.x_true, &eval_mask)?,
            ssim: metrics::ssim(&xhat, &sample.x_true, &eval_mask)?,
            blur: metrics::blur_metric(&xhat),
        });
    }
    Ok(rows)
}
