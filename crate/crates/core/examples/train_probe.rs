use convsparse::dictlearn::{bank_build, PretrainGrid};
use convsparse::estimator::{MapEstimator, Variant};
use convsparse::linops::*;
use convsparse::pipeline::{self, ReconConfig, TrainSample};
use convsparse::sim::{phantom, simulate, NoiseModel, PhantomKind};

fn dataset(n: usize, size: usize, mask: &LowResMask, sigma_sq: f64, seed: u64, kind: PhantomKind) -> Vec<TrainSample> {
    (0..n).map(|i| {
        let x_true = phantom(kind, size, size, seed + i as u64).unwrap();
        let y = simulate(&x_true, mask, &NoiseModel::new(sigma_sq, seed + 10_000 + i as u64).unwrap()).unwrap();
        TrainSample { y, x_true }
    }).collect()
}

fn unmasked_mse(a: &ComplexImage, b: &ComplexImage) -> f64 {
    let n = (a.height * a.width) as f64;
    let mut acc = 0.0;
    for i in 0..a.re.len() {
        acc += (a.re[i] - b.re[i]).powi(2) + (a.im[i] - b.im[i]).powi(2);
    }
    acc / n
}

fn main() {
    let (h, w) = (32usize, 32usize);
    let grid = PretrainGrid { betas: vec![0.25], lambdas: vec![0.1], kernel_sizes: vec![5], filter_counts: vec![8] };

    for kind in [PhantomKind::PiecewiseSmooth, PhantomKind::RandomBlobs] {
        let corpus: Vec<ComplexImage> = (0..8).map(|i| phantom(kind, h, w, 9900 + i).unwrap()).collect();
        let bank = bank_build(&grid, &corpus, 4, 9901, "p").unwrap();
        let d = &bank.entries[0].dictionary;
        for sigma in [0.1, 0.2] {
            let mask = LowResMask::centered(h, w, 16, 16);
            let samples = dataset(12, h, &mask, sigma, 9000, kind);
            let rc = ReconConfig { t_total: 20, t_grad: 8, ..ReconConfig::desk_scale() };
            let mut est = MapEstimator::init(Variant::V3, 8, 9902).unwrap();
            pipeline::calibrate_scale(&mut est, &samples[0], &mask, d, &rc).unwrap();
            let t_cal = est.t;
            let mut line = format!("{kind:?} sig={sigma}: tcal={t_cal:.3} |");
            for mult in [1e6, 4.0, 2.0, 1.0, 0.5, 0.25, 0.1] {
                est.t = t_cal * mult;
                let mut loss = 0.0;
                for s in &samples {
                    let xh = pipeline::reconstruct(&s.y, &mask, d, &est, &rc).unwrap();
                    loss += unmasked_mse(&xh, &s.x_true);
                }
                line.push_str(&format!(" x{mult}:{:.4}", loss / samples.len() as f64));
            }
            println!("{line}");
        }
    }
}
