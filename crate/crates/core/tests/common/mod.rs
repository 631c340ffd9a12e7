#![allow(dead_code)]

use fpfl_core::minutiae_map::{encode_map, MapConfig, Minutia, MinutiaeTemplate};
use fpfl_core::net::{loss_and_grad, Dropout, NetConfig, NetParams, TrainBatch};
use fpfl_core::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_template<R: Rng>(rng: &mut R, n: usize, w: u32, h: u32) -> MinutiaeTemplate {
    let m = (0..n)
        .map(|_| {
            Minutia::new(
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
            .unwrap()
        })
        .collect();
    MinutiaeTemplate::new(m, w, h).unwrap()
}

/// Minimal circular distance, written independently of the library.
pub fn circ_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Cell-by-cell brute-force evaluation of the map sum in f64.
pub fn brute_force_map(t: &MinutiaeTemplate, cfg: &MapConfig) -> Vec<f64> {
    let (h, w, c) = (cfg.h_map, cfg.w_map, cfg.channels);
    let sx = w as f64 / t.width() as f64;
    let sy = h as f64 / t.height() as f64;
    let mut out = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
                let mut s = 0.0;
                for m in t.minutiae() {
                    let dx = m.x * sx - (j as f64 + 0.5);
                    let dy = m.y * sy - (i as f64 + 0.5);
                    let cs = (-(dx * dx + dy * dy) / (2.0 * cfg.sigma_s * cfg.sigma_s)).exp();
                    let co = (-circ_dist(m.theta, angle) / (2.0 * cfg.sigma_o * cfg.sigma_o)).exp();
                    s += cs * co;
                }
                out[(i * w + j) * c + k] = s;
            }
        }
    }
    out
}

/// A small network that still exercises every block type.
pub fn tiny_config(use_localizer: bool, seed: u64) -> NetConfig {
    NetConfig {
        in_h: 16,
        in_w: 16,
        stem_channels: vec![3, 4],
        branch_channels: 3,
        embed_dim: 4,
        num_classes: 3,
        map_h: 4,
        map_w: 4,
        map_c: 3,
        minutiae_pool: 2,
        use_localizer,
        loc_pool: 4,
        seed,
        ..Default::default()
    }
}

pub fn random_batch(cfg: &NetConfig, n: usize, seed: u64) -> TrainBatch {
    let mut r = rng(seed);
    let images = (0..n)
        .map(|_| GrayImage::from_fn(cfg.in_h, cfg.in_w, |_, _| r.random::<f32>()))
        .collect();
    let labels = (0..n).map(|_| r.random_range(0..cfg.num_classes)).collect();
    let maps = (0..n)
        .map(|_| {
            let t = random_template(&mut r, 5, cfg.in_w as u32, cfg.in_h as u32);
            encode_map(&t, &cfg.map_config()).unwrap()
        })
        .collect();
    TrainBatch::new(images, labels, maps).unwrap()
}

/// Relative error with a small floor so that two vanishing values agree.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

#[derive(Debug)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: f64,
}

/// Central-difference check of up to `per_block` entries of every block.
/// Entries where the loss is visibly non-smooth at the step size (a ReLU,
/// max-pool or bilinear kink within reach) are retried with a smaller step,
/// then skipped and counted.
pub fn check_net_gradients(
    params: &NetParams<f64>,
    batch: &TrainBatch,
    dropout: Dropout,
    per_block: usize,
    step: f64,
    seed: u64,
) -> Vec<BlockCheck> {
    let (_, grads) = loss_and_grad(params, batch, dropout).unwrap();
    let mut r = rng(seed);
    let total = |p: &NetParams<f64>| loss_and_grad(p, batch, dropout).unwrap().0.total;
    let mut report = Vec::new();
    for bi in 0..params.blocks().len() {
        let len = params.blocks()[bi].data.len();
        let mut idx: Vec<usize> = (0..len).collect();
        if len > per_block {
            for k in 0..per_block {
                let j = r.random_range(k..len);
                idx.swap(k, j);
            }
        }
        let mut check = BlockCheck {
            name: params.blocks()[bi].name.clone(),
            checked: 0,
            skipped_kinks: 0,
            worst: 0.0,
        };
        for &e in &idx {
            if check.checked == per_block {
                break;
            }
            let mut p = params.clone();
            let v = p.blocks()[bi].data[e];
            let mut eval = |d: f64| {
                p.blocks_mut()[bi].data[e] = v + d;
                total(&p)
            };
            let mut numeric = None;
            for h in [step, step / 10.0] {
                let full = (eval(h) - eval(-h)) / (2.0 * h);
                let half = (eval(h / 2.0) - eval(-h / 2.0)) / h;
                if rel_err(full, half) <= 5e-5 {
                    numeric = Some(full);
                    break;
                }
            }
            let Some(numeric) = numeric else {
                check.skipped_kinks += 1;
                continue;
            };
            let analytic = grads.blocks()[bi].data[e];
            check.worst = check.worst.max(rel_err(analytic, numeric));
            check.checked += 1;
        }
        report.push(check);
    }
    report
}
