use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::NetConfig;
use super::model::{backward_sample, extract_embeddings, forward_sample, SampleGrad};
use super::optim::{cosine_lr, rmsprop_step, OptState};
use super::params::NetParams;
use crate::error::{validation, Error, Result};
use crate::real::Real;
use crate::spatial_transform::GrayImage;
use crate::template::dot_f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the first epoch; it follows a cosine down to
    /// `min_lr` at the last.
    pub lr: f64,
    pub min_lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 150,
            batch_size: 10,
            lr: 1e-3,
            min_lr: 1e-5,
            decay: 0.9,
            eps: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    /// Mean per-image `½‖u − t‖²` before training and after each epoch.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// Mean cosine between student and teacher templates after training.
    pub mean_cosine: f64,
}

/// `½‖u − t‖²`.
pub fn distill_loss(u: &[f64], t: &[f64]) -> f64 {
    0.5 * u.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Teacher templates, computed once.
pub fn teacher_targets(teacher: &NetParams<f32>, images: &[GrayImage]) -> Result<Vec<Vec<f64>>> {
    Ok(extract_embeddings(teacher, images)?
        .into_iter()
        .map(|t| t.values().iter().map(|&v| v as f64).collect())
        .collect())
}

/// Batch-mean distillation loss of `student` against `targets` and its
/// gradient. The student output is the unit-length concatenation of its two
/// embeddings, exactly as in template fusion.
pub fn distill_loss_and_grad<T: Real>(
    student: &NetParams<T>,
    images: &[GrayImage],
    targets: &[Vec<f64>],
) -> Result<(f64, NetParams<T>)> {
    let cfg = student.config();
    if images.is_empty() || images.len() != targets.len() {
        return Err(validation("distillation needs one target per image"));
    }
    if let Some(t) = targets.iter().find(|t| t.len() != cfg.template_dim()) {
        return Err(validation(format!(
            "target length {} does not match student template dim {}",
            t.len(),
            cfg.template_dim()
        )));
    }
    let inv_n = 1.0 / images.len() as f64;
    let d = cfg.embed_dim;
    let mut grads = student.zeros_like();
    let mut total = 0.0;
    for (image, t) in images.iter().zip(targets) {
        let (out, cache) = forward_sample(student, image, None)?;
        let z: Vec<f64> = out.x1.iter().chain(&out.x2).map(|v| v.f64()).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        let u: Vec<f64> = z.iter().map(|v| v / norm).collect();
        total += distill_loss(&u, t) * inv_n;
        // d/du = u − t; through u = z/‖z‖: dz = (du − u (u·du)) / ‖z‖.
        let du: Vec<f64> = u.iter().zip(t).map(|(a, b)| (a - b) * inv_n).collect();
        let udu: f64 = u.iter().zip(&du).map(|(a, b)| a * b).sum();
        let dz: Vec<T> = du.iter().zip(&u).map(|(g, a)| T::of((g - a * udu) / norm)).collect();
        let g = SampleGrad {
            dlogits1: None,
            dlogits2: None,
            dmap: None,
            dx1: Some(dz[..d].to_vec()),
            dx2: Some(dz[d..].to_vec()),
        };
        backward_sample(student, &out, &cache, g, &mut grads);
    }
    Ok((total, grads))
}

fn mean_loss(student: &NetParams<f32>, images: &[GrayImage], targets: &[Vec<f64>]) -> Result<(f64, f64)> {
    let got = extract_embeddings(student, images)?;
    let n = images.len() as f64;
    let mut loss = 0.0;
    let mut cos = 0.0;
    for (s, t) in got.iter().zip(targets) {
        let u: Vec<f64> = s.values().iter().map(|&v| v as f64).collect();
        loss += distill_loss(&u, t) / n;
        let tf: Vec<f32> = t.iter().map(|&v| v as f32).collect();
        cos += dot_f64(s.values(), &tf) / n;
    }
    Ok((loss, cos))
}

/// Trains a fresh student from `student_cfg` to reproduce the teacher's
/// templates on `images`.
pub fn distill(
    teacher: &NetParams<f32>,
    student_cfg: &NetConfig,
    images: &[GrayImage],
    cfg: &DistillConfig,
) -> Result<(NetParams, DistillReport)> {
    distill_from(teacher, NetParams::init(student_cfg)?, images, cfg, |_, _| {})
}

/// Continues distilling into `student`; `on_epoch(epoch, loss)` is called
/// after every epoch.
pub fn distill_from(
    teacher: &NetParams<f32>,
    mut student: NetParams<f32>,
    images: &[GrayImage],
    cfg: &DistillConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(NetParams, DistillReport)> {
    let (td, sd) = (teacher.config().template_dim(), student.config().template_dim());
    if td != sd {
        return Err(validation(format!(
            "teacher templates have {td} values but the student produces {sd}"
        )));
    }
    if !(cfg.min_lr > 0.0 && cfg.min_lr <= cfg.lr) {
        return Err(validation("need 0 < min_lr <= lr"));
    }
    if images.is_empty() || cfg.batch_size == 0 {
        return Err(validation("distillation needs images and a positive batch size"));
    }
    let targets = teacher_targets(teacher, images)?;
    let mut state = OptState::new(&student, cfg.lr, cfg.decay, cfg.eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (initial_loss, _) = mean_loss(&student, images, &targets)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let scale = student.config().loc_lr_scale;
    for epoch in 0..cfg.epochs {
        state.lr = cosine_lr(cfg.lr, cfg.min_lr, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let imgs: Vec<GrayImage> = chunk.iter().map(|&i| images[i].clone()).collect();
            let tgts: Vec<Vec<f64>> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let (l, grads) = distill_loss_and_grad(&student, &imgs, &tgts)?;
            if !l.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("distillation loss {l} at learning rate {}", cfg.lr),
                });
            }
            rmsprop_step(&mut student, &grads, &mut state, scale);
        }
        let (l, _) = mean_loss(&student, images, &targets)?;
        on_epoch(epoch, l);
        epoch_losses.push(l);
    }
    let (_, mean_cosine) = mean_loss(&student, images, &targets)?;
    Ok((
        student,
        DistillReport {
            initial_loss,
            epoch_losses,
            mean_cosine,
        },
    ))
}
