//! Convolutional dictionary pretraining.
//!
//! Batch alternating minimization of
//!
//! ```text
//!   sum_i  0.5 || D s_i - xhigh_i ||^2  +  lambda || s_i ||_1
//! ```
//!
//! over unit-norm filters `D` and coefficient stacks `s_i`, where
//! `xhigh_i` is the high-pass component of corpus image `i` under the
//! grid's own `beta`. Coding uses the unrolled solver; the filter update
//! is a projected gradient step with backtracking. New codes are only
//! accepted when they do not worsen the objective, so the recorded
//! per-epoch objective trace is nonincreasing.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fista::{self, FistaConfig, SparsityMaps};
use crate::highpass::{split, HighpassConfig};
use crate::linops::{
    dict_synthesize, forward_a, CoefficientStack, ComplexImage, Dictionary, DictionaryMeta,
    LowResMask,
};
use crate::tensor::conv2d_backward_kernels;

/// Iterations of the inner sparse-coding solve.
pub const CODING_ITERS: usize = 40;
const BACKTRACK_LIMIT: usize = 40;
const DEGENERATE_NORM: f64 = 1e-12;

/// Hyper-parameter grid for a bank of dictionaries.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainGrid {
    pub betas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub kernel_sizes: Vec<usize>,
    pub filter_counts: Vec<usize>,
}

impl PretrainGrid {
    /// The full-scale grid: 3 betas x 4 lambdas x 2 kernel sizes x 4
    /// filter counts, 96 dictionaries.
    pub fn paper_scale() -> Self {
        Self {
            betas: vec![0.1, 0.25, 0.5],
            lambdas: vec![0.1, 0.5, 2.0, 4.0],
            kernel_sizes: vec![9, 11],
            filter_counts: vec![16, 32, 64, 128],
        }
    }

    /// 16-entry grid small enough for the test bench.
    pub fn desk_scale() -> Self {
        Self {
            betas: vec![0.1, 0.25],
            lambdas: vec![0.1, 0.5],
            kernel_sizes: vec![5, 7],
            filter_counts: vec![4, 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.iter().any(|&b| b <= 0.0)
            || self.lambdas.iter().any(|&l| l <= 0.0)
            || self.filter_counts.iter().any(|&k| k == 0)
        {
            return Err(Error::InvalidConfig("grid entries must be positive".into()));
        }
        if self.kernel_sizes.iter().any(|&k| k % 2 == 0) {
            return Err(Error::InvalidConfig("kernel sizes must be odd".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.betas.len() * self.lambdas.len() * self.kernel_sizes.len() * self.filter_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product in `(K, k_f, lambda, beta)` nesting order.
    pub fn keys(&self) -> Vec<DictKey> {
        let mut keys = Vec::with_capacity(self.len());
        for &filter_count in &self.filter_counts {
            for &kernel_size in &self.kernel_sizes {
                for &lambda in &self.lambdas {
                    for &beta in &self.betas {
                        keys.push(DictKey { filter_count, kernel_size, lambda, beta });
                    }
                }
            }
        }
        keys
    }
}

/// Identifying hyper-parameters of one bank entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DictKey {
    pub filter_count: usize,
    pub kernel_size: usize,
    pub lambda: f64,
    pub beta: f64,
}

impl std::fmt::Display for DictKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "K{}_kf{}_lam{}_beta{}",
            self.filter_count, self.kernel_size, self.lambda, self.beta
        )
    }
}

/// One trained bank entry with its objective trace.
#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub key: DictKey,
    pub dictionary: Dictionary,
    pub objective_trace: Vec<f64>,
}

/// Keyed set of trained dictionaries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DictionaryBank {
    pub entries: Vec<BankEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BankManifestEntry {
    key: String,
    dictionary: String,
    trace: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BankManifest {
    entries: Vec<BankManifestEntry>,
}

impl DictionaryBank {
    pub fn get(&self, key: &str) -> Option<&BankEntry> {
        self.entries.iter().find(|e| e.key.to_string() == key)
    }

    pub fn keys(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.key.to_string()).collect()
    }

    /// Write one dictionary file and one objective-trace CSV per entry,
    /// indexed by `bank.json`.
    pub fn save_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = BankManifest { entries: Vec::new() };
        for entry in &self.entries {
            let key = entry.key.to_string();
            let dict_name = format!("{key}.cdld");
            let trace_name = format!("{key}.trace.csv");
            crate::io::save_dictionary(&entry.dictionary, &dir.join(&dict_name))?;
            let mut csv = String::from("epoch,objective\n");
            for (i, obj) in entry.objective_trace.iter().enumerate() {
                csv.push_str(&format!("{i},{obj}\n"));
            }
            std::fs::write(dir.join(&trace_name), csv)?;
            manifest.entries.push(BankManifestEntry { key, dictionary: dict_name, trace: trace_name });
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("bank manifest encode: {e}")))?;
        std::fs::write(dir.join("bank.json"), json)?;
        Ok(())
    }

    /// Load a bank from its `bank.json` directory.
    pub fn load_dir(dir: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(dir.join("bank.json"))?;
        let manifest: BankManifest = serde_json::from_str(&json)
            .map_err(|e| Error::Format(format!("bank manifest decode: {e}")))?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for m in &manifest.entries {
            let dictionary = crate::io::load_dictionary(&dir.join(&m.dictionary))?;
            let mut objective_trace = Vec::new();
            for line in std::fs::read_to_string(dir.join(&m.trace))?.lines().skip(1) {
                let val = line
                    .rsplit(',')
                    .next()
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Format(format!("bad trace line `{line}`")))?;
                objective_trace.push(val);
            }
            let key = DictKey {
                filter_count: dictionary.filter_count,
                kernel_size: dictionary.kernel_size,
                lambda: dictionary.meta.lambda,
                beta: dictionary.meta.beta,
            };
            if key.to_string() != m.key {
                return Err(Error::Format(format!(
                    "bank entry `{}` does not match its dictionary metadata `{key}`",
                    m.key
                )));
            }
            entries.push(BankEntry { key, dictionary, objective_trace });
        }
        Ok(Self { entries })
    }
}

fn gaussian_unit_filters(filter_count: usize, kernel_size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let n = kernel_size * kernel_size;
    let mut filters = vec![0.0; filter_count * n];
    for f in 0..filter_count {
        loop {
            for v in &mut filters[f * n..(f + 1) * n] {
                *v = normal.sample(rng);
            }
            let norm = filters[f * n..(f + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > DEGENERATE_NORM {
                for v in &mut filters[f * n..(f + 1) * n] {
                    *v /= norm;
                }
                break;
            }
        }
    }
    filters
}

/// `sum_i 0.5 || D s_i - xhigh_i ||^2`.
fn data_term(filters: &[f64], key: &DictKey, codes: &[CoefficientStack], targets: &[ComplexImage]) -> Result<f64> {
    let d = Dictionary::new(
        key.filter_count,
        key.kernel_size,
        filters.to_vec(),
        DictionaryMeta { beta: key.beta, lambda: key.lambda, corpus: String::new(), created: String::new() },
    )?;
    let mut acc = 0.0;
    for (s, x) in codes.iter().zip(targets) {
        let ds = dict_synthesize(s, &d)?;
        for i in 0..ds.re.len() {
            let dr = ds.re[i] - x.re[i];
            let di = ds.im[i] - x.im[i];
            acc += dr * dr + di * di;
        }
    }
    Ok(0.5 * acc)
}

fn l1_term(codes: &[CoefficientStack], lambda: f64) -> f64 {
    let mut acc = 0.0;
    for s in codes {
        for i in 0..s.re.len() {
            acc += s.re[i].abs() + s.im[i].abs();
        }
    }
    lambda * acc
}

fn project_unit_norm(filters: &mut [f64], filter_count: usize, kernel_size: usize, reinit_rng: &mut impl Rng) -> usize {
    let n = kernel_size * kernel_size;
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut reinits = 0;
    for f in 0..filter_count {
        let norm = filters[f * n..(f + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM {
            reinits += 1;
            log::warn!("degenerate filter {f} (norm {norm:.3e}); reinitializing");
            loop {
                for v in &mut filters[f * n..(f + 1) * n] {
                    *v = normal.sample(reinit_rng);
                }
                let nn = filters[f * n..(f + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
                if nn > DEGENERATE_NORM {
                    for v in &mut filters[f * n..(f + 1) * n] {
                        *v /= nn;
                    }
                    break;
                }
            }
        } else {
            for v in &mut filters[f * n..(f + 1) * n] {
                *v /= norm;
            }
        }
    }
    reinits
}

/// Train one dictionary on `corpus` with the given hyper-parameters.
/// Returns the dictionary and the per-epoch objective trace.
pub fn pretrain_dictionary(
    corpus: &[ComplexImage],
    filter_count: usize,
    kernel_size: usize,
    lambda: f64,
    beta: f64,
    epochs: usize,
    seed: u64,
    corpus_tag: &str,
) -> Result<(Dictionary, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("pretraining corpus is empty".into()));
    }
    if lambda <= 0.0 || beta <= 0.0 {
        return Err(Error::InvalidConfig("lambda and beta must be positive".into()));
    }
    if kernel_size % 2 == 0 || filter_count == 0 {
        return Err(Error::InvalidConfig("need odd kernel size and at least one filter".into()));
    }
    let (h, w) = (corpus[0].height, corpus[0].width);
    for img in corpus {
        corpus[0].check_same_shape(img, "pretrain corpus")?;
    }

    let key = DictKey { filter_count, kernel_size, lambda, beta };
    let mut init_rng = crate::rng::stream(seed, &format!("dict/{key}/init"));
    let mut reinit_rng = crate::rng::stream(seed, &format!("dict/{key}/reinit"));
    let mut step_seed_rng = crate::rng::stream(seed, &format!("dict/{key}/step-seeds"));
    let mut filters = gaussian_unit_filters(filter_count, kernel_size, &mut init_rng);

    // unitary all-pass forward keeps the coding problem in image space
    let mask = LowResMask::all_pass(h, w);
    let cfg_maps = SparsityMaps::uniform(filter_count, h, w, lambda)?;

    let mut targets = Vec::with_capacity(corpus.len());
    let mut data_spectra = Vec::with_capacity(corpus.len());
    for img in corpus {
        let (_, x_high) = split(img, &HighpassConfig { beta })?;
        data_spectra.push(forward_a(&x_high, &mask)?);
        targets.push(x_high);
    }

    let mut codes: Vec<CoefficientStack> =
        (0..corpus.len()).map(|_| CoefficientStack::zeros(filter_count, h, w)).collect();
    let mut trace = Vec::with_capacity(epochs);
    let mut current_obj =
        data_term(&filters, &key, &codes, &targets)? + l1_term(&codes, lambda);

    for _epoch in 0..epochs {
        let dict = Dictionary::new(
            filter_count,
            kernel_size,
            filters.clone(),
            DictionaryMeta {
                beta,
                lambda,
                corpus: corpus_tag.to_string(),
                created: String::new(),
            },
        )?;

        // (a) sparse coding, accepted per-image only when not worse
        let step = fista::step_for(&dict, &mask, step_seed_rng.gen())?;
        let coding_cfg = FistaConfig {
            t_total: CODING_ITERS,
            t_grad: 1,
            step,
            momentum_a: 3.0,
        };
        for (i, spectrum) in data_spectra.iter().enumerate() {
            // warm-started coding; kept only when it does not worsen the
            // objective, so the outer trace stays monotone
            let candidate = fista::solve(&codes[i], &mask, &dict, spectrum, &cfg_maps, &coding_cfg)?;
            let old_obj = data_term(&filters, &key, &codes[i..=i], &targets[i..=i])?
                + l1_term(&codes[i..=i], lambda);
            let new_obj = data_term(&filters, &key, std::slice::from_ref(&candidate.stack), &targets[i..=i])?
                + l1_term(std::slice::from_ref(&candidate.stack), lambda);
            if new_obj <= old_obj {
                codes[i] = candidate.stack;
            }
        }

        // (b) projected gradient step on the filters with backtracking
        let mut grad = vec![0.0; filters.len()];
        let mut plane_grad = vec![0.0; filters.len()];
        for (s, x) in codes.iter().zip(&targets) {
            let dict_now = Dictionary::new(filter_count, kernel_size, filters.clone(), dict.meta.clone())?;
            let ds = dict_synthesize(s, &dict_now)?;
            let mut res_re = ds.re;
            let mut res_im = ds.im;
            for i in 0..res_re.len() {
                res_re[i] -= x.re[i];
                res_im[i] -= x.im[i];
            }
            conv2d_backward_kernels(&res_re, 1, h, w, &s.re, filter_count, kernel_size, crate::tensor::Padding::Circular, &mut plane_grad);
            for (g, p) in grad.iter_mut().zip(&plane_grad) {
                *g += p;
            }
            conv2d_backward_kernels(&res_im, 1, h, w, &s.im, filter_count, kernel_size, crate::tensor::Padding::Circular, &mut plane_grad);
            for (g, p) in grad.iter_mut().zip(&plane_grad) {
                *g += p;
            }
        }

        let codes_energy: f64 = codes.iter().map(CoefficientStack::norm_sq).sum();
        let mut eta = 1.0 / (codes_energy + 1e-12);
        let l1_now = l1_term(&codes, lambda);
        let data_now = data_term(&filters, &key, &codes, &targets)?;
        if grad.iter().any(|&g| g != 0.0) {
            for _try in 0..BACKTRACK_LIMIT {
                let mut candidate = filters.clone();
                for (c, g) in candidate.iter_mut().zip(&grad) {
                    *c -= eta * g;
                }
                project_unit_norm(&mut candidate, filter_count, kernel_size, &mut reinit_rng);
                let data_candidate = data_term(&candidate, &key, &codes, &targets)?;
                if data_candidate <= data_now {
                    filters = candidate;
                    break;
                }
                eta *= 0.5;
            }
        }

        let epoch_obj = data_term(&filters, &key, &codes, &targets)? + l1_now;
        debug_assert!(epoch_obj <= current_obj + 1e-9, "objective rose: {current_obj} -> {epoch_obj}");
        current_obj = epoch_obj;
        trace.push(epoch_obj);
    }

    let dict = Dictionary::new(
        filter_count,
        kernel_size,
        filters,
        DictionaryMeta {
            beta,
            lambda,
            corpus: corpus_tag.to_string(),
            created: format!("seed-{seed}"),
        },
    )?;
    Ok((dict, trace))
}

/// Train the whole grid. Each entry draws from its own named streams of
/// `seed`, so the bank is deterministic regardless of iteration order.
pub fn bank_build(
    grid: &PretrainGrid,
    corpus: &[ComplexImage],
    epochs: usize,
    seed: u64,
    corpus_tag: &str,
) -> Result<DictionaryBank> {
    grid.validate()?;
    let mut entries = Vec::with_capacity(grid.len());
    for key in grid.keys() {
        let (dictionary, objective_trace) = pretrain_dictionary(
            corpus,
            key.filter_count,
            key.kernel_size,
            key.lambda,
            key.beta,
            epochs,
            seed,
            corpus_tag,
        )
        .map_err(|e| Error::InvalidConfig(format!("bank entry {key}: {e}")))?;
        entries.push(BankEntry { key, dictionary, objective_trace });
    }
    Ok(DictionaryBank { entries })
}
