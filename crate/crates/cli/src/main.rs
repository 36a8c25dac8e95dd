//! Command-line entry point for reproducible reconstruction experiments.
//!
//! Every command is deterministic given `--seed` and writes a JSON run
//! manifest beside its outputs. Exit codes: 0 success, 2 usage errors,
//! 3 I/O failures, 4 numerical failures.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use convsparse::dictlearn::{bank_build, DictionaryBank, PretrainGrid};
use convsparse::estimator::{MapEstimator, Variant};
use convsparse::io;
use convsparse::linops::LowResMask;
use convsparse::pipeline::{self, ReconConfig, TrainConfig, TrainSample};
use convsparse::sim::{phantom, simulate, NoiseModel, PhantomKind};
use convsparse::Error;

#[derive(Parser)]
#[command(name = "convsparse", version, about = "Convolutional sparse coding reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate phantom ground truth and simulated measurement data.
    Simulate {
        /// Phantom kind: shepp-logan, blobs or piecewise.
        #[arg(long, default_value = "piecewise")]
        phantom: String,
        /// Image side length (even).
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Number of samples.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Total noise variance per complex frequency sample.
        #[arg(long, default_value_t = 0.3)]
        sigma2: f64,
        /// Retained central bandwidth as a fraction of the grid.
        #[arg(long, default_value_t = 0.5)]
        keep_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a bank of dictionaries on a corpus of CIMG images.
    PretrainDict {
        /// Directory of *.cimg images (*.truth.cimg preferred when present).
        #[arg(long)]
        corpus_dir: PathBuf,
        /// Grid, e.g. "K=4,8 kf=5,7 lambda=0.1,0.5 beta=0.1,0.25".
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output bank directory.
        #[arg(long)]
        out_bank: PathBuf,
    },
    /// Train a sparsity-map estimator on a simulated dataset.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        /// Bank directory (holding bank.json).
        #[arg(long)]
        bank: PathBuf,
        /// Estimator variant: v1, v2 or v3.
        #[arg(long, default_value = "v3")]
        variant: String,
        /// Total unrolled solver iterations.
        #[arg(long, default_value_t = 20)]
        t: usize,
        /// Gradient-tracked tail iterations.
        #[arg(long, default_value_t = 8)]
        tgrad: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr_net: f64,
        #[arg(long, default_value_t = 1e-2)]
        lr_scalars: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated bank keys to rotate during training (default all).
        #[arg(long)]
        bank_keys: Option<String>,
        #[arg(long)]
        out_ckpt: PathBuf,
    },
    /// Reconstruct one k-space file with a dictionary and a checkpoint.
    Reconstruct {
        #[arg(long)]
        ksp: PathBuf,
        /// Dictionary file (.cdld).
        #[arg(long)]
        dict: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        keep_frac: f64,
        #[arg(long, default_value_t = 20)]
        t: usize,
        /// Output prefix; writes <out>.cimg and <out>.pgm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep a dictionary bank over a dataset and emit per-sample metrics.
    Evaluate {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated bank keys (default: all).
        #[arg(long)]
        dicts: Option<String>,
        #[arg(long, default_value_t = 20)]
        t: usize,
        /// Foreground threshold as a fraction of the peak magnitude.
        #[arg(long, default_value_t = 0.05)]
        mask_threshold: f64,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Apply seeded filter permutations and report metric deltas.
    PermuteTest {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Bank key of the dictionary to permute.
        #[arg(long)]
        dict_key: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 3)]
        n_perms: usize,
        #[arg(long, default_value_t = 20)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        mask_threshold: f64,
        #[arg(long)]
        out_csv: PathBuf,
    },
}

/// Re-derivation record written beside every command's outputs.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_clock_secs: f64,
}

/// Dataset index written by `simulate` and read back by the other commands.
#[derive(Serialize, Deserialize)]
struct DatasetInfo {
    count: usize,
    height: usize,
    width: usize,
    keep_h: usize,
    keep_w: usize,
    sigma_sq: f64,
    phantom: String,
    seed: u64,
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let started = Instant::now();
    if let Err(e) = run(cli.cmd, started) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format(_) => 3,
        Error::Divergence { .. } | Error::NonFiniteLoss { .. } => 4,
        _ => 2,
    }
}

fn json_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("json encode: {e}"))
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), Error> {
    let json = serde_json::to_string_pretty(manifest).map_err(json_err)?;
    std::fs::write(path, json)?;
    Ok(())
}

fn run(cmd: Cmd, started: Instant) -> Result<(), Error> {
    match cmd {
        Cmd::Simulate { phantom: kind, size, count, sigma2, keep_frac, seed, out } => {
            cmd_simulate(&kind, size, count, sigma2, keep_frac, seed, &out, started)
        }
        Cmd::PretrainDict { corpus_dir, grid, epochs, seed, out_bank } => {
            cmd_pretrain(&corpus_dir, &grid, epochs, seed, &out_bank, started)
        }
        Cmd::Train {
            data_dir,
            bank,
            variant,
            t,
            tgrad,
            epochs,
            lr_net,
            lr_scalars,
            seed,
            bank_keys,
            out_ckpt,
        } => cmd_train(
            &data_dir, &bank, &variant, t, tgrad, epochs, lr_net, lr_scalars, seed,
            bank_keys.as_deref(), &out_ckpt, started,
        ),
        Cmd::Reconstruct { ksp, dict, ckpt, keep_frac, t, out } => {
            cmd_reconstruct(&ksp, &dict, &ckpt, keep_frac, t, &out, started)
        }
        Cmd::Evaluate { data_dir, bank, ckpt, dicts, t, mask_threshold, out_csv } => {
            cmd_evaluate(&data_dir, &bank, &ckpt, dicts.as_deref(), t, mask_threshold, &out_csv, started)
        }
        Cmd::PermuteTest { data_dir, bank, dict_key, ckpt, n_perms, t, seed, mask_threshold, out_csv } => {
            cmd_permute_test(&data_dir, &bank, &dict_key, &ckpt, n_perms, t, seed, mask_threshold, &out_csv, started)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    kind_str: &str,
    size: usize,
    count: usize,
    sigma2: f64,
    keep_frac: f64,
    seed: u64,
    out: &Path,
    started: Instant,
) -> Result<(), Error> {
    let kind: PhantomKind = kind_str.parse()?;
    if !(0.0..=1.0).contains(&keep_frac) {
        return Err(Error::InvalidConfig(format!("keep_frac must be in [0,1], got {keep_frac}")));
    }
    std::fs::create_dir_all(out)?;
    let mask = LowResMask::from_keep_frac(size, size, keep_frac);

    let mut seed_rng = convsparse::rng::stream(seed, "simulate/sample-seeds");
    let mut outputs = Vec::new();
    for i in 0..count {
        use rand::Rng;
        let phantom_seed: u64 = seed_rng.gen();
        let noise_seed: u64 = seed_rng.gen();
        let x_true = phantom(kind, size, size, phantom_seed)?;
        let y = simulate(&x_true, &mask, &NoiseModel::new(sigma2, noise_seed)?)?;
        let truth_path = out.join(format!("sample_{i:04}.truth.cimg"));
        let ksp_path = out.join(format!("sample_{i:04}.ksp.cimg"));
        io::save_image(&x_true, &truth_path)?;
        io::save_image(&y, &ksp_path)?;
        outputs.push(truth_path.display().to_string());
        outputs.push(ksp_path.display().to_string());
    }

    let info = DatasetInfo {
        count,
        height: size,
        width: size,
        keep_h: mask.keep_h,
        keep_w: mask.keep_w,
        sigma_sq: sigma2,
        phantom: kind_str.to_string(),
        seed,
    };
    std::fs::write(
        out.join("dataset.json"),
        serde_json::to_string_pretty(&info).map_err(json_err)?,
    )?;

    let manifest = RunManifest {
        command: "simulate".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config: serde_json::json!({
            "phantom": kind_str, "size": size, "count": count,
            "sigma2": sigma2, "keep_frac": keep_frac,
        }),
        inputs: vec![],
        outputs,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_manifest(&out.join("manifest.json"), &manifest)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

/// Parse "K=4,8 kf=5,7 lambda=0.1,0.5 beta=0.1,0.25".
fn parse_grid(text: &str) -> Result<PretrainGrid, Error> {
    let mut grid = PretrainGrid {
        betas: vec![],
        lambdas: vec![],
        kernel_sizes: vec![],
        filter_counts: vec![],
    };
    for token in text.split_whitespace() {
        let (key, values) = token
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("grid token `{token}` is not key=v1,v2")))?;
        match key {
            "K" => {
                grid.filter_counts = values
                    .split(',')
                    .map(|v| v.parse().map_err(|_| Error::InvalidConfig(format!("bad K `{v}`"))))
                    .collect::<Result<_, _>>()?;
            }
            "kf" => {
                grid.kernel_sizes = values
                    .split(',')
                    .map(|v| v.parse().map_err(|_| Error::InvalidConfig(format!("bad kf `{v}`"))))
                    .collect::<Result<_, _>>()?;
            }
            "lambda" => {
                grid.lambdas = values
                    .split(',')
                    .map(|v| v.parse().map_err(|_| Error::InvalidConfig(format!("bad lambda `{v}`"))))
                    .collect::<Result<_, _>>()?;
            }
            "beta" => {
                grid.betas = values
                    .split(',')
                    .map(|v| v.parse().map_err(|_| Error::InvalidConfig(format!("bad beta `{v}`"))))
                    .collect::<Result<_, _>>()?;
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown grid key `{other}` (want K, kf, lambda, beta)"
                )))
            }
        }
    }
    grid.validate()?;
    if grid.is_empty() {
        return Err(Error::InvalidConfig("grid expands to zero entries".into()));
    }
    Ok(grid)
}

fn load_corpus(dir: &Path) -> Result<Vec<convsparse::linops::ComplexImage>, Error> {
    let mut truth_files = Vec::new();
    let mut other_files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        if name.ends_with(".truth.cimg") {
            truth_files.push(path);
        } else if name.ends_with(".cimg") && !name.ends_with(".ksp.cimg") {
            other_files.push(path);
        }
    }
    let mut files = if truth_files.is_empty() { other_files } else { truth_files };
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidConfig(format!("no .cimg images found in {}", dir.display())));
    }
    files.iter().map(|p| io::load_image(p)).collect()
}

fn cmd_pretrain(
    corpus_dir: &Path,
    grid_text: &str,
    epochs: usize,
    seed: u64,
    out_bank: &Path,
    started: Instant,
) -> Result<(), Error> {
    let grid = parse_grid(grid_text)?;
    let corpus = load_corpus(corpus_dir)?;
    let tag = corpus_dir.display().to_string();
    let bank = bank_build(&grid, &corpus, epochs, seed, &tag)?;
    bank.save_dir(out_bank)?;

    let manifest = RunManifest {
        command: "pretrain-dict".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config: serde_json::json!({
            "grid": grid_text, "epochs": epochs, "entries": bank.entries.len(),
        }),
        inputs: vec![corpus_dir.display().to_string()],
        outputs: vec![out_bank.display().to_string()],
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_manifest(&out_bank.join("manifest.json"), &manifest)?;
    println!("trained {} dictionaries into {}", bank.entries.len(), out_bank.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<(Vec<TrainSample>, LowResMask, DatasetInfo), Error> {
    let info: DatasetInfo = serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)
        .map_err(|e| Error::Format(format!("dataset.json: {e}")))?;
    let mask = LowResMask::centered(info.height, info.width, info.keep_h, info.keep_w);
    let mut samples = Vec::with_capacity(info.count);
    for i in 0..info.count {
        let x_true = io::load_image(&dir.join(format!("sample_{i:04}.truth.cimg")))?;
        let y = io::load_image(&dir.join(format!("sample_{i:04}.ksp.cimg")))?;
        samples.push(TrainSample { y, x_true });
    }
    Ok((samples, mask, info))
}

fn subset_keys(bank: &DictionaryBank, selector: Option<&str>) -> Result<Vec<String>, Error> {
    match selector {
        None => Ok(bank.keys()),
        Some(list) => {
            let keys: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
            for key in &keys {
                if bank.get(key).is_none() {
                    return Err(Error::InvalidConfig(format!(
                        "bank has no entry `{key}`; available: {}",
                        bank.keys().join(", ")
                    )));
                }
            }
            Ok(keys)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data_dir: &Path,
    bank_dir: &Path,
    variant_str: &str,
    t_total: usize,
    t_grad: usize,
    epochs: usize,
    lr_net: f64,
    lr_scalars: f64,
    seed: u64,
    bank_keys: Option<&str>,
    out_ckpt: &Path,
    started: Instant,
) -> Result<(), Error> {
    let variant: Variant = variant_str.parse()?;
    let (samples, mask, _info) = load_dataset(data_dir)?;
    let bank = DictionaryBank::load_dir(bank_dir)?;
    let subset = subset_keys(&bank, bank_keys)?;

    // V1/V2 fix the channel contract to one filter count
    let first_k = bank.get(&subset[0]).expect("validated").dictionary.filter_count;
    if variant != Variant::V3 {
        for key in &subset {
            let k = bank.get(key).expect("validated").dictionary.filter_count;
            if k != first_k {
                return Err(Error::InvalidConfig(format!(
                    "{variant} needs one filter count; subset mixes K={first_k} and K={k} (use v3)"
                )));
            }
        }
    }

    let est = MapEstimator::init(variant, first_k, seed)?;
    let rc = ReconConfig { t_total, t_grad, ..ReconConfig::desk_scale() };
    let mut tc = TrainConfig::new(epochs, seed, subset.clone());
    tc.lr_net = lr_net;
    tc.lr_scalars = lr_scalars;

    let (trained, trace) = pipeline::train(&samples, &mask, &bank, est, &rc, &tc)?;
    trained.save(out_ckpt)?;
    let trace_path = out_ckpt.with_extension("loss.csv");
    io::write_loss_trace_csv(&trace_path, &trace)?;

    let manifest = RunManifest {
        command: "train".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config: serde_json::json!({
            "variant": variant_str, "t": t_total, "tgrad": t_grad, "epochs": epochs,
            "lr_net": lr_net, "lr_scalars": lr_scalars, "bank_subset": subset,
        }),
        inputs: vec![data_dir.display().to_string(), bank_dir.display().to_string()],
        outputs: vec![out_ckpt.display().to_string(), trace_path.display().to_string()],
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_manifest(&out_ckpt.with_extension("manifest.json"), &manifest)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("trained {variant_str} for {epochs} epochs; loss {first:.6} -> {last:.6}");
    } else {
        println!("no training epochs requested; checkpoint written unchanged");
    }
    Ok(())
}

fn cmd_reconstruct(
    ksp: &Path,
    dict: &Path,
    ckpt: &Path,
    keep_frac: f64,
    t_total: usize,
    out: &Path,
    started: Instant,
) -> Result<(), Error> {
    let y = io::load_image(ksp)?;
    let d = io::load_dictionary(dict)?;
    let est = MapEstimator::load(ckpt)?;
    let mask = LowResMask::from_keep_frac(y.height, y.width, keep_frac);
    let rc = ReconConfig { t_total, t_grad: 1, ..ReconConfig::desk_scale() };
    let xhat = pipeline::reconstruct(&y, &mask, &d, &est, &rc)?;

    let cimg_path = out.with_extension("cimg");
    let pgm_path = out.with_extension("pgm");
    io::save_image(&xhat, &cimg_path)?;
    io::save_magnitude_pgm(&xhat, &pgm_path)?;

    let manifest = RunManifest {
        command: "reconstruct".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: 0,
        config: serde_json::json!({ "keep_frac": keep_frac, "t": t_total }),
        inputs: vec![
            ksp.display().to_string(),
            dict.display().to_string(),
            ckpt.display().to_string(),
        ],
        outputs: vec![cimg_path.display().to_string(), pgm_path.display().to_string()],
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_manifest(&out.with_extension("manifest.json"), &manifest)?;
    println!("reconstructed {} -> {}", ksp.display(), cimg_path.display());
    Ok(())
}

/// Evaluate samples in parallel across a fixed dictionary.
fn evaluate_parallel(
    samples: &[TrainSample],
    mask: &LowResMask,
    d: &convsparse::linops::Dictionary,
    dict_key: &str,
    est: &MapEstimator,
    rc: &ReconConfig,
    mask_threshold: f64,
) -> Result<Vec<io::MetricRow>, Error> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let chunk = samples.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<io::MetricRow>, Error>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .enumerate()
            .map(|(ci, block)| {
                scope.spawn(move || {
                    let mut rows =
                        pipeline::evaluate(block, mask, d, dict_key, est, rc, mask_threshold)?;
                    for (j, row) in rows.iter_mut().enumerate() {
                        row.sample_id = format!("{:04}", ci * chunk + j);
                    }
                    Ok(rows)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(samples.len());
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    data_dir: &Path,
    bank_dir: &Path,
    ckpt: &Path,
    dicts: Option<&str>,
    t_total: usize,
    mask_threshold: f64,
    out_csv: &Path,
    started: Instant,
) -> Result<(), Error> {
    let (samples, mask, _info) = load_dataset(data_dir)?;
    let bank = DictionaryBank::load_dir(bank_dir)?;
    let keys = subset_keys(&bank, dicts)?;
    let est = MapEstimator::load(ckpt)?;
    let rc = ReconConfig { t_total, t_grad: 1, ..ReconConfig::desk_scale() };

    let mut rows = Vec::new();
    for key in &keys {
        let entry = bank.get(key).expect("validated");
        let dict_rows =
            evaluate_parallel(&samples, &mask, &entry.dictionary, key, &est, &rc, mask_threshold)?;
        let mean_mse = dict_rows.iter().map(|r| r.mse).sum::<f64>() / dict_rows.len().max(1) as f64;
        println!("{key}: mean mse {mean_mse:.6}");
        rows.extend(dict_rows);
    }
    io::write_metrics_csv(out_csv, &rows)?;

    let manifest = RunManifest {
        command: "evaluate".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: 0,
        config: serde_json::json!({ "dicts": keys, "t": t_total, "mask_threshold": mask_threshold }),
        inputs: vec![
            data_dir.display().to_string(),
            bank_dir.display().to_string(),
            ckpt.display().to_string(),
        ],
        outputs: vec![out_csv.display().to_string()],
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_manifest(&out_csv.with_extension("manifest.json"), &manifest)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_permute_test(
    data_dir: &Path,
    bank_dir: &Path,
    dict_key: &str,
    ckpt: &Path,
    n_perms: usize,
    t_total: usize,
    seed: u64,
    mask_threshold: f64,
    out_csv: &Path,
    started: Instant,
) -> Result<(), Error> {
    let (samples, mask, _info) = load_dataset(data_dir)?;
    let bank = DictionaryBank::load_dir(bank_dir)?;
    let entry = bank
        .get(dict_key)
        .ok_or_else(|| Error::InvalidConfig(format!("bank has no entry `{dict_key}`")))?;
    let est = MapEstimator::load(ckpt)?;
    let rc = ReconConfig { t_total, t_grad: 1, ..ReconConfig::desk_scale() };

    let base = pipeline::evaluate(&samples, &mask, &entry.dictionary, dict_key, &est, &rc, mask_threshold)?;
    let mean = |rows: &[io::MetricRow]| {
        let n = rows.len() as f64;
        (
            rows.iter().map(|r| r.mse).sum::<f64>() / n,
            rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        )
    };
    let (base_mse, base_ssim) = mean(&base);

    let mut csv = String::from("perm_id,delta_mse,delta_ssim\n");
    // identity permutation sanity row
    let identity: Vec<usize> = (0..entry.dictionary.filter_count).collect();
    for (label, perm) in std::iter::once(("identity".to_string(), identity)).chain(
        (0..n_perms).map(|p| {
            (
                format!("{p}"),
                convsparse::linops::random_permutation(
                    entry.dictionary.filter_count,
                    seed,
                    &format!("permute-test/{p}"),
                ),
            )
        }),
    ) {
        let dp = entry.dictionary.permuted(&perm)?;
        let rows = pipeline::evaluate(&samples, &mask, &dp, dict_key, &est, &rc, mask_threshold)?;
        let (mse, ssim) = mean(&rows);
        let (dmse, dssim) = (mse - base_mse, ssim - base_ssim);
        println!("perm {label}: delta_mse {dmse:+.3e}, delta_ssim {dssim:+.3e}");
        csv.push_str(&format!("{label},{dmse},{dssim}\n"));
    }
    std::fs::write(out_csv, csv)?;

    let manifest = RunManifest {
        command: "permute-test".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config: serde_json::json!({
            "dict_key": dict_key, "n_perms": n_perms, "t": t_total,
            "base_mse": base_mse, "base_ssim": base_ssim,
        }),
        inputs: vec![
            data_dir.display().to_string(),
            bank_dir.display().to_string(),
            ckpt.display().to_string(),
        ],
        outputs: vec![out_csv.display().to_string()],
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_manifest(&out_csv.with_extension("manifest.json"), &manifest)?;
    Ok(())
}
