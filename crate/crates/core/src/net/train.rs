use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::NetConfig;
use super::model::{forward, loss, loss_and_grad, Dropout, LossBreakdown, TrainBatch};
use super::optim::{cosine_lr, rmsprop_step, OptState};
use super::params::NetParams;
use crate::error::{validation, Error, Result};
use crate::minutiae_map::{encode_map, MapConfig, Minutia, MinutiaeMap, MinutiaeTemplate};
use crate::spatial_transform::{grid_sample_with, AffineMatrix, GrayImage, Padding};
use crate::synth::Impression;

/// Ranges of the random similarity and brightness changes applied to each
/// training sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub max_rotation: f64,
    /// Pixels.
    pub max_translation: f64,
    /// Crops cover a `[min_scale, 1]` fraction of the side before resizing.
    pub min_scale: f64,
    pub max_brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation: 15f64.to_radians(),
            max_translation: 4.0,
            min_scale: 0.85,
            max_brightness: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// When set, the rate follows a cosine from `lr` down to this value.
    pub min_lr: Option<f64>,
    pub decay: f64,
    pub eps: f64,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 30,
            lr: 1e-3,
            min_lr: None,
            decay: 0.9,
            eps: 1e-8,
            seed: 0,
            augment: Some(AugmentConfig::default()),
            dropout: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total loss of the epoch's training batches (augmented, dropout on).
    pub train_loss: f64,
    /// Loss over the unaugmented training set after the epoch, dropout off.
    pub clean: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial: LossBreakdown,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_loss(&self) -> LossBreakdown {
        self.epochs.last().map(|e| e.clean).unwrap_or(self.initial)
    }
}

/// Random rotation, translation, crop-and-resize and brightness change.
/// Minutiae follow the warp; those leaving the frame are dropped.
pub fn augment<R: Rng + ?Sized>(
    image: &GrayImage,
    minutiae: &MinutiaeTemplate,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<(GrayImage, MinutiaeTemplate)> {
    let sym = |rng: &mut R, b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
    let rot = sym(rng, cfg.max_rotation);
    let tx = sym(rng, cfg.max_translation);
    let ty = sym(rng, cfg.max_translation);
    let scale = if cfg.min_scale < 1.0 {
        rng.random_range(cfg.min_scale..=1.0)
    } else {
        1.0
    };
    let brightness = sym(rng, cfg.max_brightness);
    let (h, w) = (image.height(), image.width());
    let a = AffineMatrix::similarity(scale, scale, rot, 2.0 * tx / w as f64, 2.0 * ty / h as f64);
    let mut out = grid_sample_with(image, &a, h, w, Padding::Border)?;
    for p in out.pixels_mut() {
        *p = (*p + brightness as f32).clamp(0.0, 1.0);
    }
    let inv = a.inverse().ok_or_else(|| validation("degenerate augmentation transform"))?;
    let (wf, hf) = (minutiae.width() as f64, minutiae.height() as f64);
    let moved = minutiae
        .minutiae()
        .iter()
        .filter_map(|m| {
            let (xn, yn) = inv.apply(2.0 * m.x / wf - 1.0, 2.0 * m.y / hf - 1.0);
            let (x, y) = ((xn + 1.0) * wf / 2.0, (yn + 1.0) * hf / 2.0);
            ((0.0..wf).contains(&x) && (0.0..hf).contains(&y)).then(|| Minutia::new(x, y, m.theta - rot))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, MinutiaeTemplate::new(moved, minutiae.width(), minutiae.height())?))
}

fn target_maps(data: &[Impression], mc: &MapConfig) -> Result<Vec<MinutiaeMap>> {
    data.iter().map(|imp| encode_map(&imp.minutiae, mc)).collect()
}

fn clean_batch(data: &[Impression], maps: &[MinutiaeMap]) -> Result<TrainBatch> {
    TrainBatch::new(
        data.iter().map(|d| d.image.clone()).collect(),
        data.iter().map(|d| d.label).collect(),
        maps.to_vec(),
    )
}

/// Loss over a whole labelled set, unaugmented and without dropout.
pub fn evaluate_loss(params: &NetParams<f32>, data: &[Impression]) -> Result<LossBreakdown> {
    if data.is_empty() {
        return Err(validation("cannot evaluate the loss of an empty set"));
    }
    let maps = target_maps(data, &params.config().map_config())?;
    evaluate_with_maps(params, data, &maps)
}

fn evaluate_with_maps(params: &NetParams<f32>, data: &[Impression], maps: &[MinutiaeMap]) -> Result<LossBreakdown> {
    const CHUNK: usize = 32;
    let n = data.len() as f64;
    let mut acc = LossBreakdown::default();
    for (d, m) in data.chunks(CHUNK).zip(maps.chunks(CHUNK)) {
        let batch = clean_batch(d, m)?;
        let (out, _) = forward(params, &batch.images, Dropout::Off)?;
        let lb = loss(params, &out, &batch)?;
        let f = d.len() as f64 / n;
        acc.texture_ce += lb.texture_ce * f;
        acc.minutiae_ce += lb.minutiae_ce * f;
        acc.map += lb.map * f;
        acc.decay = lb.decay;
    }
    let w = params.config().loss_weights;
    acc.total = w.texture * acc.texture_ce + w.minutiae * acc.minutiae_ce + w.map * acc.map + acc.decay;
    Ok(acc)
}

fn check_data(net: &NetConfig, data: &[Impression]) -> Result<()> {
    if data.is_empty() {
        return Err(validation("training set is empty"));
    }
    let mut labels: Vec<usize> = data.iter().map(|d| d.label).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(validation("training needs at least two classes"));
    }
    if let Some(&l) = labels.last().filter(|&&l| l >= net.num_classes) {
        return Err(validation(format!("label {l} out of range for {} classes", net.num_classes)));
    }
    Ok(())
}

/// Trains a freshly initialized network.
pub fn train(data: &[Impression], net: &NetConfig, cfg: &TrainConfig) -> Result<(NetParams, TrainReport)> {
    train_from(NetParams::init(net)?, data, cfg, |_| {})
}

/// Continues training `params`; `on_epoch` sees each epoch's statistics.
pub fn train_from(
    mut params: NetParams,
    data: &[Impression],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(NetParams, TrainReport)> {
    let net = params.config().clone();
    check_data(&net, data)?;
    if cfg.batch_size == 0 {
        return Err(validation("batch_size must be positive"));
    }
    if let Some(m) = cfg.min_lr {
        if !(m > 0.0 && m <= cfg.lr) {
            return Err(validation("need 0 < min_lr <= lr"));
        }
    }
    let mc = net.map_config();
    let maps = target_maps(data, &mc)?;
    let mut state = OptState::new(&params, cfg.lr, cfg.decay, cfg.eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = evaluate_with_maps(&params, data, &maps)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        state.lr = cosine_lr(cfg.lr, cfg.min_lr.unwrap_or(cfg.lr), epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut batch_maps = Vec::with_capacity(chunk.len());
            for &i in chunk {
                match &cfg.augment {
                    Some(aug) => {
                        let (img, mnt) = augment(&data[i].image, &data[i].minutiae, &mut rng, aug)?;
                        images.push(img);
                        batch_maps.push(encode_map(&mnt, &mc)?);
                    }
                    None => {
                        images.push(data[i].image.clone());
                        batch_maps.push(maps[i].clone());
                    }
                }
            }
            let labels = chunk.iter().map(|&i| data[i].label).collect();
            let batch = TrainBatch::new(images, labels, batch_maps)?;
            let dropout = if cfg.dropout {
                Dropout::Seeded(rng.random())
            } else {
                Dropout::Off
            };
            let (lb, grads) = loss_and_grad(&params, &batch, dropout)?;
            if !lb.total.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("loss {:?} at learning rate {}", lb, cfg.lr),
                });
            }
            rmsprop_step(&mut params, &grads, &mut state, net.loc_lr_scale);
            sum += lb.total;
            steps += 1;
        }
        let clean = evaluate_with_maps(&params, data, &maps)?;
        if !clean.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: steps,
                detail: format!("evaluation loss {:?} at learning rate {}", clean, cfg.lr),
            });
        }
        let stats = EpochStats {
            epoch,
            train_loss: sum / steps.max(1) as f64,
            clean,
        };
        on_epoch(&stats);
        epochs.push(stats);
    }
    Ok((params, TrainReport { initial, epochs }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_identity, render_with, Perturbation, SynthConfig};

    #[test]
    fn identity_augmentation_keeps_minutiae() {
        let id = gen_identity(1, &SynthConfig::default()).unwrap();
        let imp = render_with(&id, &Perturbation::none(), 0);
        let cfg = AugmentConfig {
            max_rotation: 0.0,
            max_translation: 0.0,
            min_scale: 1.0,
            max_brightness: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (img, mnt) = augment(&imp.image, &imp.minutiae, &mut rng, &cfg).unwrap();
        assert_eq!(img, imp.image);
        assert_eq!(mnt.len(), imp.minutiae.len());
        for (a, b) in mnt.minutiae().iter().zip(imp.minutiae.minutiae()) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
    }

    #[test]
    fn augmentation_moves_minutiae_with_the_image() {
        // A bright dot at a minutia must still sit under the moved minutia.
        let mut img = GrayImage::zeros(64, 64);
        for (y, x) in [(20, 30), (20, 31), (21, 30), (21, 31)] {
            img.pixels_mut()[y * 64 + x] = 1.0;
        }
        let m = MinutiaeTemplate::new(vec![Minutia::new(31.0, 21.0, 0.5).unwrap()], 64, 64).unwrap();
        let cfg = AugmentConfig {
            max_brightness: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let (out, mm) = augment(&img, &m, &mut rng, &cfg).unwrap();
            let p = mm.minutiae()[0];
            let (mut best, mut at) = (0.0, (0, 0));
            for y in 0..64 {
                for x in 0..64 {
                    if out.get(y, x) > best {
                        best = out.get(y, x);
                        at = (y, x);
                    }
                }
            }
            assert!((at.1 as f64 + 0.5 - p.x).abs() <= 1.5 && (at.0 as f64 + 0.5 - p.y).abs() <= 1.5);
        }
    }
}
