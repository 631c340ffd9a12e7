use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::params::NetParams;
use crate::error::{validation, Result};
use crate::minutiae_map::MinutiaeMap;
use crate::real::Real;
use crate::spatial_transform::{build_affine, sample_buffer, sample_buffer_backward, AlignmentParams, GrayImage, Padding};
use crate::template::{fuse, BranchEmbedding, FixedTemplate};

/// Dropout on the embeddings in front of the classifiers. `Seeded` draws an
/// independent mask per sample from the seed and the sample's batch index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dropout {
    Off,
    Seeded(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub images: Vec<GrayImage>,
    pub labels: Vec<usize>,
    /// Target minutiae maps, channel last.
    pub maps: Vec<MinutiaeMap>,
}

impl TrainBatch {
    pub fn new(images: Vec<GrayImage>, labels: Vec<usize>, maps: Vec<MinutiaeMap>) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() || images.len() != maps.len() {
            return Err(validation("batch needs equally many images, labels and maps, at least one"));
        }
        Ok(TrainBatch { images, labels, maps })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput<T> {
    pub logits1: Vec<T>,
    pub logits2: Vec<T>,
    /// Predicted minutiae map, `map_h × map_w × map_c`, channel last.
    pub map_pred: Vec<T>,
    /// Texture embedding (before dropout).
    pub x1: Vec<T>,
    /// Minutiae embedding (before dropout).
    pub x2: Vec<T>,
}

/// Mean loss terms over a batch. The data terms are unweighted; `total`
/// applies the configured weights and adds the decay term.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub texture_ce: f64,
    pub minutiae_ce: f64,
    pub map: f64,
    pub decay: f64,
    pub total: f64,
}

pub(crate) struct Localized<T> {
    raw_image: Vec<T>,
    pooled: Vec<T>,
    params: AlignmentParams,
    /// d(clamped param)/d(head output), zero where the clamp saturates.
    pass: [f64; 3],
}

pub(crate) struct SampleCache<T> {
    loc: Option<Localized<T>>,
    stage_inputs: Vec<Vec<T>>,
    stage_acts: Vec<Vec<T>>,
    stage_args: Vec<Vec<u32>>,
    feat: Vec<T>,
    tex_act: Vec<T>,
    tex_pool: Vec<T>,
    min_act: Vec<T>,
    min_pool: Vec<T>,
    mask1: Option<Vec<T>>,
    mask2: Option<Vec<T>>,
}

/// Intermediate activations kept by [`forward`] for [`backward`].
pub struct ForwardCache<T> {
    pub(crate) samples: Vec<SampleCache<T>>,
}

fn dropout_mask<T: Real>(seed: u64, sample: usize, branch: u64, len: usize, keep: f64) -> Option<Vec<T>> {
    if keep >= 1.0 {
        return None;
    }
    let mixed = seed ^ (sample as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ branch.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let scale = T::of(1.0 / keep);
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect(),
    )
}

fn apply_mask<T: Real>(x: &[T], mask: &Option<Vec<T>>) -> Vec<T> {
    match mask {
        Some(m) => x.iter().zip(m).map(|(&a, &b)| a * b).collect(),
        None => x.to_vec(),
    }
}

fn check_image<T: Real>(params: &NetParams<T>, image: &GrayImage) -> Result<()> {
    let cfg = params.config();
    if image.height() != cfg.in_h || image.width() != cfg.in_w {
        return Err(validation(format!(
            "image is {}x{} but the network expects {}x{}",
            image.height(),
            image.width(),
            cfg.in_h,
            cfg.in_w
        )));
    }
    Ok(())
}

pub(crate) fn forward_sample<T: Real>(
    params: &NetParams<T>,
    image: &GrayImage,
    dropout: Option<(u64, usize)>,
) -> Result<(SampleOutput<T>, SampleCache<T>)> {
    check_image(params, image)?;
    let cfg = params.config();
    let l = &params.layout;
    let (mut h, mut w) = (cfg.in_h, cfg.in_w);
    let mut x: Vec<T> = image.pixels().iter().map(|&v| T::of(v as f64 - 0.5)).collect();

    let loc = match l.loc {
        Some(li) => {
            let pooled = avgpool(&x, 1, h, w, cfg.loc_pool);
            let r = linear(&pooled, params.data(li), params.data(li + 1));
            let bounds = cfg.alignment_bounds();
            let scale = [bounds.max_translation, bounds.max_translation, bounds.max_rotation];
            let raw = [r[0].f64() * scale[0], r[1].f64() * scale[1], r[2].f64() * scale[2]];
            let ap = AlignmentParams::clamped(raw[0], raw[1], raw[2], &bounds)?;
            let pass = [0, 1, 2].map(|k| if raw[k].abs() < scale[k] { scale[k] } else { 0.0 });
            let mut aligned = vec![T::zero(); h * w];
            sample_buffer(&x, h, w, &build_affine(&ap, w, h), Padding::Zeros, h, w, &mut aligned);
            let raw_image = std::mem::replace(&mut x, aligned);
            Some(Localized {
                raw_image,
                pooled,
                params: ap,
                pass,
            })
        }
        None => None,
    };

    let mut stage_inputs = Vec::with_capacity(l.stem.len());
    let mut stage_acts = Vec::with_capacity(l.stem.len());
    let mut stage_args = Vec::with_capacity(l.stem.len());
    let mut ci = 1;
    for (&bi, &co) in l.stem.iter().zip(&cfg.stem_channels) {
        let mut act = vec![T::zero(); co * h * w];
        conv3x3(&x, ci, h, w, params.data(bi), params.data(bi + 1), co, &mut act);
        relu(&mut act);
        let (pooled, arg) = maxpool2(&act, co, h, w);
        stage_inputs.push(std::mem::replace(&mut x, pooled));
        stage_acts.push(act);
        stage_args.push(arg);
        ci = co;
        h /= 2;
        w /= 2;
    }
    let feat = x;
    let c = cfg.branch_channels;

    let mut tex_act = vec![T::zero(); c * h * w];
    conv3x3(&feat, ci, h, w, params.data(l.tex_conv), params.data(l.tex_conv + 1), c, &mut tex_act);
    relu(&mut tex_act);
    let tex_pool = avgpool(&tex_act, c, h, w, 1);
    let x1 = linear(&tex_pool, params.data(l.tex_fc), params.data(l.tex_fc + 1));

    let mut min_act = vec![T::zero(); c * h * w];
    conv3x3(&feat, ci, h, w, params.data(l.min_conv), params.data(l.min_conv + 1), c, &mut min_act);
    relu(&mut min_act);
    let min_pool = avgpool(&min_act, c, h, w, cfg.minutiae_pool);
    let x2 = linear(&min_pool, params.data(l.min_fc), params.data(l.min_fc + 1));

    let mc = cfg.map_c;
    let mut map_chw = vec![T::zero(); mc * h * w];
    conv3x3(&min_act, c, h, w, params.data(l.map), params.data(l.map + 1), mc, &mut map_chw);
    let mut map_pred = vec![T::zero(); mc * h * w];
    for k in 0..mc {
        for p in 0..h * w {
            map_pred[p * mc + k] = map_chw[k * h * w + p];
        }
    }

    let (mask1, mask2) = match dropout {
        Some((seed, b)) => (
            dropout_mask(seed, b, 1, x1.len(), cfg.dropout_keep),
            dropout_mask(seed, b, 2, x2.len(), cfg.dropout_keep),
        ),
        None => (None, None),
    };
    let logits1 = linear(&apply_mask(&x1, &mask1), params.data(l.cls1), params.data(l.cls1 + 1));
    let logits2 = linear(&apply_mask(&x2, &mask2), params.data(l.cls2), params.data(l.cls2 + 1));

    Ok((
        SampleOutput {
            logits1,
            logits2,
            map_pred,
            x1,
            x2,
        },
        SampleCache {
            loc,
            stage_inputs,
            stage_acts,
            stage_args,
            feat,
            tex_act,
            tex_pool,
            min_act,
            min_pool,
            mask1,
            mask2,
        },
    ))
}

/// Runs the network on every image. Dropout masks are only drawn when
/// `dropout` is `Seeded`.
pub fn forward<T: Real>(
    params: &NetParams<T>,
    images: &[GrayImage],
    dropout: Dropout,
) -> Result<(Vec<SampleOutput<T>>, ForwardCache<T>)> {
    let mut outputs = Vec::with_capacity(images.len());
    let mut samples = Vec::with_capacity(images.len());
    for (b, image) in images.iter().enumerate() {
        let seed = match dropout {
            Dropout::Off => None,
            Dropout::Seeded(s) => Some((s, b)),
        };
        let (o, c) = forward_sample(params, image, seed)?;
        outputs.push(o);
        samples.push(c);
    }
    Ok((outputs, ForwardCache { samples }))
}

fn check_targets<T: Real>(params: &NetParams<T>, outputs: &[SampleOutput<T>], batch: &TrainBatch) -> Result<()> {
    let cfg = params.config();
    if outputs.len() != batch.len() {
        return Err(validation("outputs and batch differ in length"));
    }
    for (&label, map) in batch.labels.iter().zip(&batch.maps) {
        if label >= cfg.num_classes {
            return Err(validation(format!("label {label} out of range for {} classes", cfg.num_classes)));
        }
        let m = map.config();
        if (m.h_map, m.w_map, m.channels) != (cfg.map_h, cfg.map_w, cfg.map_c) {
            return Err(validation(format!(
                "target map is {}x{}x{} but the head predicts {}x{}x{}",
                m.h_map, m.w_map, m.channels, cfg.map_h, cfg.map_w, cfg.map_c
            )));
        }
    }
    Ok(())
}

/// `Σ (pred − target)²` over all cells of one map.
pub fn map_loss<T: Real>(pred: &[T], target: &[f32]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p.f64() - t as f64;
            d * d
        })
        .sum()
}

/// Batch-mean joint loss of `outputs` against `batch`, plus
/// `weight_decay · ‖θ‖² / 2`.
pub fn loss<T: Real>(params: &NetParams<T>, outputs: &[SampleOutput<T>], batch: &TrainBatch) -> Result<LossBreakdown> {
    check_targets(params, outputs, batch)?;
    let cfg = params.config();
    let n = batch.len() as f64;
    let mut lb = LossBreakdown::default();
    for ((o, &label), map) in outputs.iter().zip(&batch.labels).zip(&batch.maps) {
        lb.texture_ce += cross_entropy(&o.logits1, label).0 / n;
        lb.minutiae_ce += cross_entropy(&o.logits2, label).0 / n;
        lb.map += map_loss(&o.map_pred, map.values()) / n;
    }
    lb.decay = cfg.weight_decay * params.sum_squares() / 2.0;
    let w = cfg.loss_weights;
    lb.total = w.texture * lb.texture_ce + w.minutiae * lb.minutiae_ce + w.map * lb.map + lb.decay;
    Ok(lb)
}

/// Upstream gradients for one sample.
pub(crate) struct SampleGrad<T> {
    pub dlogits1: Option<Vec<T>>,
    pub dlogits2: Option<Vec<T>>,
    /// Channel last, like the prediction.
    pub dmap: Option<Vec<T>>,
    /// Direct gradients on the embeddings, before dropout.
    pub dx1: Option<Vec<T>>,
    pub dx2: Option<Vec<T>>,
}

fn add_into<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

pub(crate) fn backward_sample<T: Real>(
    params: &NetParams<T>,
    out: &SampleOutput<T>,
    cache: &SampleCache<T>,
    g: SampleGrad<T>,
    grads: &mut NetParams<T>,
) {
    let cfg = params.config();
    let l = params.layout.clone();
    let (fh, fw) = cfg.feature_dims();
    let ci = cfg.stem_out_channels();
    let c = cfg.branch_channels;
    let d = cfg.embed_dim;

    let mut dx1 = g.dx1.unwrap_or_else(|| vec![T::zero(); d]);
    let mut dx2 = g.dx2.unwrap_or_else(|| vec![T::zero(); d]);
    if let Some(dl) = g.dlogits1 {
        let xd = apply_mask(&out.x1, &cache.mask1);
        let (dw, db) = grads.pair_mut(l.cls1);
        let dxd = linear_backward(&xd, params.data(l.cls1), &dl, dw, db);
        add_into(&mut dx1, &apply_mask(&dxd, &cache.mask1));
    }
    if let Some(dl) = g.dlogits2 {
        let xd = apply_mask(&out.x2, &cache.mask2);
        let (dw, db) = grads.pair_mut(l.cls2);
        let dxd = linear_backward(&xd, params.data(l.cls2), &dl, dw, db);
        add_into(&mut dx2, &apply_mask(&dxd, &cache.mask2));
    }

    let mut dfeat = vec![T::zero(); cache.feat.len()];

    // Minutiae branch: embedding and map head share the activation.
    let mut dmin_act = {
        let (dw, db) = grads.pair_mut(l.min_fc);
        let dpool = linear_backward(&cache.min_pool, params.data(l.min_fc), &dx2, dw, db);
        avgpool_backward(&dpool, c, fh, fw, cfg.minutiae_pool)
    };
    if let Some(dm) = g.dmap {
        let mc = cfg.map_c;
        let mut dchw = vec![T::zero(); dm.len()];
        for k in 0..mc {
            for p in 0..fh * fw {
                dchw[k * fh * fw + p] = dm[p * mc + k];
            }
        }
        let (dw, db) = grads.pair_mut(l.map);
        conv3x3_backward(&cache.min_act, c, fh, fw, params.data(l.map), &dchw, mc, dw, db, Some(&mut dmin_act));
    }
    relu_backward(&cache.min_act, &mut dmin_act);
    {
        let (dw, db) = grads.pair_mut(l.min_conv);
        conv3x3_backward(&cache.feat, ci, fh, fw, params.data(l.min_conv), &dmin_act, c, dw, db, Some(&mut dfeat));
    }

    let mut dtex_act = {
        let (dw, db) = grads.pair_mut(l.tex_fc);
        let dpool = linear_backward(&cache.tex_pool, params.data(l.tex_fc), &dx1, dw, db);
        avgpool_backward(&dpool, c, fh, fw, 1)
    };
    relu_backward(&cache.tex_act, &mut dtex_act);
    {
        let (dw, db) = grads.pair_mut(l.tex_conv);
        conv3x3_backward(&cache.feat, ci, fh, fw, params.data(l.tex_conv), &dtex_act, c, dw, db, Some(&mut dfeat));
    }

    // Stem, last stage first.
    let mut dx = dfeat;
    let (mut h, mut w) = (fh, fw);
    for s in (0..l.stem.len()).rev() {
        h *= 2;
        w *= 2;
        let co = cfg.stem_channels[s];
        let cin = if s == 0 { 1 } else { cfg.stem_channels[s - 1] };
        let act = &cache.stage_acts[s];
        let mut dact = maxpool2_backward(&dx, &cache.stage_args[s], act.len());
        relu_backward(act, &mut dact);
        let need_dx = s > 0 || cache.loc.is_some();
        let mut din = if need_dx { vec![T::zero(); cin * h * w] } else { Vec::new() };
        let (dw, db) = grads.pair_mut(l.stem[s]);
        conv3x3_backward(
            &cache.stage_inputs[s],
            cin,
            h,
            w,
            params.data(l.stem[s]),
            &dact,
            co,
            dw,
            db,
            need_dx.then_some(&mut din[..]),
        );
        dx = din;
    }

    if let (Some(li), Some(loc)) = (l.loc, &cache.loc) {
        let g3 = sample_buffer_backward(&loc.raw_image, h, w, &loc.params, Padding::Zeros, &dx, h, w);
        let dr: Vec<T> = (0..3).map(|k| T::of(g3[k].f64() * loc.pass[k])).collect();
        let (dw, db) = grads.pair_mut(li);
        linear_backward(&loc.pooled, params.data(li), &dr, dw, db);
    }
}

/// Exact gradients of [`loss`] with respect to every parameter, replaying
/// the dropout masks held in `cache`.
pub fn backward<T: Real>(
    params: &NetParams<T>,
    batch: &TrainBatch,
    outputs: &[SampleOutput<T>],
    cache: &ForwardCache<T>,
) -> Result<NetParams<T>> {
    check_targets(params, outputs, batch)?;
    let cfg = params.config();
    let inv_n = 1.0 / batch.len() as f64;
    let w = cfg.loss_weights;
    let mut grads = params.zeros_like();
    for (b, (out, sc)) in outputs.iter().zip(&cache.samples).enumerate() {
        let label = batch.labels[b];
        let ce_grad = |logits: &[T], weight: f64| -> Vec<T> {
            let p = softmax(logits);
            p.iter()
                .enumerate()
                .map(|(k, &v)| {
                    let t = if k == label { 1.0 } else { 0.0 };
                    T::of((v.f64() - t) * weight * inv_n)
                })
                .collect()
        };
        let dmap = out
            .map_pred
            .iter()
            .zip(batch.maps[b].values())
            .map(|(&p, &t)| T::of(2.0 * (p.f64() - t as f64) * w.map * inv_n))
            .collect();
        let g = SampleGrad {
            dlogits1: Some(ce_grad(&out.logits1, w.texture)),
            dlogits2: Some(ce_grad(&out.logits2, w.minutiae)),
            dmap: Some(dmap),
            dx1: None,
            dx2: None,
        };
        backward_sample(params, out, sc, g, &mut grads);
    }
    let wd = T::of(cfg.weight_decay);
    if cfg.weight_decay > 0.0 {
        grads.add_scaled(params, wd);
    }
    Ok(grads)
}

/// Forward, loss and backward in one call.
pub fn loss_and_grad<T: Real>(
    params: &NetParams<T>,
    batch: &TrainBatch,
    dropout: Dropout,
) -> Result<(LossBreakdown, NetParams<T>)> {
    let (outputs, cache) = forward(params, &batch.images, dropout)?;
    let lb = loss(params, &outputs, batch)?;
    let grads = backward(params, batch, &outputs, &cache)?;
    Ok((lb, grads))
}

/// Inference-mode texture and minutiae embeddings of one image.
pub fn embed<T: Real>(params: &NetParams<T>, image: &GrayImage) -> Result<(Vec<T>, Vec<T>)> {
    let (out, _) = forward_sample(params, image, None)?;
    Ok((out.x1, out.x2))
}

/// Fused unit-length template of one image.
pub fn extract_embedding(params: &NetParams<f32>, image: &GrayImage) -> Result<FixedTemplate> {
    let (x1, x2) = embed(params, image)?;
    fuse(&BranchEmbedding::texture(x1)?, &BranchEmbedding::minutiae(x2)?)
}

/// [`extract_embedding`] over many images, spread over the rayon pool.
pub fn extract_embeddings(params: &NetParams<f32>, images: &[GrayImage]) -> Result<Vec<FixedTemplate>> {
    use rayon::prelude::*;
    images.par_iter().map(|im| extract_embedding(params, im)).collect()
}
