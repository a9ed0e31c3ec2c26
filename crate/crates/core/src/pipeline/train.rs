use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{lr_at, AdamW};
use super::{patch_pair, Augment, TrainConfig};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::model::{Model, PairSample};
use crate::numcore::{ParamId, Session, Tensor};
use crate::synthdata::Sequence;

/// One line of the loss log. `total` and `cls` use the classification loss
/// averaged over all filter iterates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
    pub lr: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,L_total,L_cls,L_bbox,lr";

pub fn format_loss_log(logs: &[EpochLog]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for l in logs {
        let _ = writeln!(s, "{},{},{},{},{}", l.epoch, l.total, l.cls, l.bbox, l.lr);
    }
    s
}

/// Uniform jitter of `b`'s centre by up to `frac` of its size per axis, and
/// of its log-size by up to `log_scale`.
fn jitter_box(rng: &mut ChaCha8Rng, b: &BBox, frac: f64, log_scale: f64) -> BBox {
    let (cx, cy) = b.center();
    let mut u = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let (dx, dy) = (u(frac) * b.w, u(frac) * b.h);
    let (sw, sh) = (u(log_scale).exp(), u(log_scale).exp());
    BBox::from_center(cx + dx, cy + dy, b.w * sw, b.h * sh)
}

fn augment(rng: &mut ChaCha8Rng, cfg: &TrainConfig, flip: bool) -> Augment {
    let (lo, hi) = cfg.brightness_range;
    Augment {
        flip,
        brightness: if hi > lo { rng.gen_range(lo..=hi) } else { lo },
    }
}

/// Crops a template/search pair from `frames = (template, search)`.
///
/// The template crop is centred on the target jittered by
/// `template_jitter`; the search crop on a box jittered by `search_jitter`
/// (translation) and `search_scale_jitter` (log size), which also serves as
/// the regression prior. Both crops have side `5 sqrt(w h)` for the default
/// area factor of 25.
pub fn make_training_pair(seq: &Sequence, frames: (usize, usize), cfg: &TrainConfig, seed: u64) -> Result<PairSample> {
    let (ti, si) = frames;
    let gt = |i: usize| -> Result<BBox> {
        seq.groundtruth
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::InvalidArgument(format!("frame {i} has no visible target")))
    };
    let (t_box, s_box) = (gt(ti)?, gt(si)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side_factor = cfg.crop_area_factor.sqrt();
    let flip = rng.gen_bool(cfg.flip_probability);

    let t_center = jitter_box(&mut rng, &t_box, cfg.template_jitter, 0.0);
    let t_aug = augment(&mut rng, cfg, flip);
    let (template_rgb, template_depth, t_tf) = patch_pair(
        &seq.rgb[ti],
        &seq.depth[ti],
        t_center.center(),
        side_factor * t_box.area().sqrt(),
        cfg.patch_size,
        cfg.max_depth_mm,
        t_aug,
    )?;

    let prior = jitter_box(&mut rng, &s_box, cfg.search_jitter, cfg.search_scale_jitter);
    let s_aug = augment(&mut rng, cfg, flip);
    let (search_rgb, search_depth, s_tf) = patch_pair(
        &seq.rgb[si],
        &seq.depth[si],
        prior.center(),
        side_factor * prior.area().sqrt(),
        cfg.patch_size,
        cfg.max_depth_mm,
        s_aug,
    )?;

    let patch = cfg.patch_size as f64;
    let mirror = |b: BBox| if flip { BBox::new(patch - b.x - b.w, b.y, b.w, b.h) } else { b };
    Ok(PairSample {
        template_rgb,
        template_depth,
        template_box: mirror(t_tf.box_to_patch(&t_box)),
        search_rgb,
        search_depth,
        search_box: mirror(s_tf.box_to_patch(&s_box)),
        search_prior: mirror(s_tf.box_to_patch(&prior)),
    })
}

/// Picks a sequence and a (template, search) frame pair, both visible and
/// at most `max_frame_gap` apart.
fn sample_frames(rng: &mut ChaCha8Rng, dataset: &[Sequence], max_gap: usize) -> Option<(usize, usize, usize)> {
    for _ in 0..64 {
        let k = rng.gen_range(0..dataset.len());
        let seq = &dataset[k];
        let visible: Vec<usize> = (0..seq.len()).filter(|&i| seq.visible(i)).collect();
        if visible.is_empty() {
            continue;
        }
        let t = visible[rng.gen_range(0..visible.len())];
        let near: Vec<usize> = visible
            .iter()
            .copied()
            .filter(|&i| i != t && i.abs_diff(t) <= max_gap)
            .collect();
        let s = if near.is_empty() { t } else { near[rng.gen_range(0..near.len())] };
        return Some((k, t, s));
    }
    None
}

struct PairOutcome {
    grads: Vec<(ParamId, Tensor)>,
    cls: f64,
    bbox: f64,
}

fn run_pair(model: &Model, pair: &PairSample, lambda: f64) -> Result<PairOutcome> {
    let mut sess = Session::new(&model.store, true);
    let losses = model.pair_losses(&mut sess, pair, lambda)?;
    let cls = sess.value(losses.cls_mean).item();
    let bbox = sess.value(losses.bbox).item();
    let grads = sess.backward(losses.total)?;
    Ok(PairOutcome { grads, cls, bbox })
}

/// Trains `model` in place. `on_epoch` sees each log line as it is produced.
pub fn train(
    model: &mut Model,
    dataset: &[Sequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if cfg.patch_size != model.config.patch_size {
        return Err(Error::InvalidArgument(format!(
            "training patch size {} differs from the model's {}",
            cfg.patch_size, model.config.patch_size
        )));
    }
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let batches = cfg.pairs_per_epoch.div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.learning_rate, cfg.lr_decay_factor, cfg.lr_decay_period_epochs, epoch);
        let (mut sum_cls, mut sum_bbox, mut count) = (0.0, 0.0, 0usize);
        for batch in 0..batches {
            let lo = batch * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(cfg.pairs_per_epoch);
            let pairs = (lo..hi)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream((epoch * cfg.pairs_per_epoch + i) as u64);
                    let (k, t, s) = sample_frames(&mut rng, dataset, cfg.max_frame_gap)
                        .ok_or_else(|| Error::InvalidArgument("no sequence has a visible target".into()))?;
                    make_training_pair(&dataset[k], (t, s), cfg, rng.gen())
                })
                .collect::<Result<Vec<_>>>()?;
            let outcomes = run_batch(model, &pairs, cfg)?;
            model.store.zero_grads();
            let scale = 1.0 / outcomes.len() as f64;
            let (mut b_cls, mut b_bbox) = (0.0, 0.0);
            for o in &outcomes {
                model.store.accumulate(&o.grads, scale);
                b_cls += o.cls;
                b_bbox += o.bbox;
            }
            let grads_finite = model.ids().iter().all(|&id| model.store.grad(id).is_finite());
            if !(b_cls.is_finite() && b_bbox.is_finite() && grads_finite) {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, batch {batch}: L_cls = {}, L_bbox = {}, gradients finite = {grads_finite}",
                    b_cls * scale,
                    b_bbox * scale
                )));
            }
            opt.step(&mut model.store, lr);
            sum_cls += b_cls;
            sum_bbox += b_bbox;
            count += outcomes.len();
        }
        let (cls, bbox) = (sum_cls / count as f64, sum_bbox / count as f64);
        let log = EpochLog {
            epoch,
            total: cfg.lambda * cls + bbox,
            cls,
            bbox,
            lr,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Gradients of every pair in a batch, in pair order regardless of `jobs`.
fn run_batch(model: &Model, pairs: &[PairSample], cfg: &TrainConfig) -> Result<Vec<PairOutcome>> {
    let jobs = cfg.jobs.clamp(1, pairs.len().max(1));
    if jobs == 1 {
        return pairs.iter().map(|p| run_pair(model, p, cfg.lambda)).collect();
    }
    let chunk = pairs.len().div_ceil(jobs);
    let model = &*model;
    std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(|p| run_pair(model, p, cfg.lambda)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(pairs.len());
        for h in handles {
            out.extend(h.join().expect("training worker panicked")?);
        }
        Ok(out)
    })
}
