use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{patch_pair, Augment};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::model::{argmax, classify, learn_filter, regress_bbox, regression_deltas, FilterSample, Model};
use crate::numcore::{Session, Tape, Tensor};
use crate::synthdata::{DepthFrame, RgbFrame, Sequence, DEFAULT_MAX_DEPTH_MM};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Search area as a multiple of the target area.
    pub crop_area_factor: f64,
    /// Frames scoring above this are added to memory and refine the filter.
    pub confidence_gate: f64,
    pub memory_capacity: usize,
    /// Size of the augmented initial sample set (the first is unaugmented).
    pub init_samples: usize,
    pub init_jitter: f64,
    pub flip_probability: f64,
    pub brightness_range: (f64, f64),
    pub max_depth_mm: f64,
    /// Gradient steps per gated frame.
    pub refine_steps: usize,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            crop_area_factor: 25.0,
            confidence_gate: 0.5,
            memory_capacity: 30,
            init_samples: 15,
            init_jitter: 0.1,
            flip_probability: 0.5,
            brightness_range: (0.8, 1.2),
            max_depth_mm: DEFAULT_MAX_DEPTH_MM,
            refine_steps: 1,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.init_samples == 0 || self.memory_capacity < self.init_samples {
            return Err(Error::InvalidArgument(format!(
                "memory capacity {} cannot hold {} initial samples",
                self.memory_capacity, self.init_samples
            )));
        }
        if !(self.crop_area_factor > 0.0 && self.max_depth_mm > 0.0) {
            return Err(Error::InvalidArgument("crop area factor and depth range must be positive".into()));
        }
        Ok(())
    }
}

/// Normalised classifier columns of one patch and its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySample {
    pub cols: Tensor,
    pub labels: Tensor,
    /// Initial samples are never evicted.
    pub initial: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub current_box: BBox,
    /// `1 x C k^2` classifier row.
    pub filter: Tensor,
    pub memory: Vec<MemorySample>,
    pub last_confidence: f64,
    pub config: TrackerConfig,
    pub frame_size: (usize, usize),
}

fn fit_filter(model: &Model, memory: &[MemorySample], init: Option<&Tensor>, steps: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let samples: Vec<FilterSample> = memory
        .iter()
        .map(|m| FilterSample {
            cols: tape.constant(m.cols.clone()),
            labels: m.labels.clone(),
        })
        .collect();
    let init = init.map(|f| tape.constant(f.clone()));
    let cfg = &model.config;
    let iterates = learn_filter(&mut tape, &samples, init, steps, cfg.labels.threshold, &cfg.filter)?;
    Ok(tape.value(*iterates.last().expect("at least f_0")).clone())
}

fn columns(model: &Model, rgb: &Tensor, depth: &Tensor) -> Result<Tensor> {
    let mut sess = Session::new(&model.store, false);
    let cols = model.columns(&mut sess, rgb, depth)?;
    Ok(sess.value(cols).clone())
}

fn search_side(b: &BBox, area_factor: f64) -> f64 {
    area_factor.sqrt() * b.area().sqrt()
}

/// Builds the initial sample set around `init_box` and fits the filter to it.
pub fn init_tracker(
    model: &Model,
    rgb: &RgbFrame,
    depth: &DepthFrame,
    init_box: &BBox,
    cfg: &TrackerConfig,
) -> Result<TrackerState> {
    cfg.validate()?;
    let (w, h) = (rgb.width as f64, rgb.height as f64);
    if !(init_box.w > 0.0 && init_box.h > 0.0) || !init_box.is_finite() {
        return Err(Error::InvalidArgument(format!("degenerate initial box {init_box:?}")));
    }
    let init_box = init_box.clamp_to(w, h, 1.0);
    let patch = model.config.patch_size;
    let side = search_side(&init_box, cfg.crop_area_factor);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut memory = Vec::with_capacity(cfg.memory_capacity);
    for i in 0..cfg.init_samples {
        let (center, aug) = if i == 0 {
            (init_box.center(), Augment::IDENTITY)
        } else {
            let (cx, cy) = init_box.center();
            let j = cfg.init_jitter;
            let dx = if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 } * init_box.w;
            let dy = if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 } * init_box.h;
            let flip = rng.gen_bool(cfg.flip_probability);
            let (lo, hi) = cfg.brightness_range;
            let brightness = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            ((cx + dx, cy + dy), Augment { flip, brightness })
        };
        let (rp, dp, tf) = patch_pair(rgb, depth, center, side, patch, cfg.max_depth_mm, aug)?;
        let mut b = tf.box_to_patch(&init_box);
        if aug.flip {
            b.x = patch as f64 - b.x - b.w;
        }
        memory.push(MemorySample {
            cols: columns(model, &rp, &dp)?,
            labels: model.labels_for(&b)?,
            initial: true,
        });
    }
    let filter = fit_filter(model, &memory, None, model.config.filter.n_iter)?;
    Ok(TrackerState {
        current_box: init_box,
        filter,
        memory,
        last_confidence: 1.0,
        config: cfg.clone(),
        frame_size: (rgb.width, rgb.height),
    })
}

/// Locates the target in a new frame. The box is always updated; memory and
/// filter change only when the confidence exceeds the gate.
pub fn track_step(model: &Model, state: &mut TrackerState, rgb: &RgbFrame, depth: &DepthFrame) -> Result<(BBox, f64)> {
    let cfg = &model.config;
    let patch = cfg.patch_size;
    let m = cfg.map_size()?;
    let side = search_side(&state.current_box, state.config.crop_area_factor);
    // With an even number of cells the patch centre is a cell corner; shift
    // the crop so the previous centre sits on a cell centre instead, which
    // keeps a stationary target from flipping between neighbouring cells.
    let shift = if m % 2 == 0 { 0.5 * cfg.stride() as f64 * side / patch as f64 } else { 0.0 };
    let (cx, cy) = state.current_box.center();
    let (rp, dp, tf) = patch_pair(
        rgb,
        depth,
        (cx - shift, cy - shift),
        side,
        patch,
        state.config.max_depth_mm,
        Augment::IDENTITY,
    )?;

    let mut sess = Session::new(&model.store, false);
    let cols = model.columns(&mut sess, &rp, &dp)?;
    let f = sess.constant(state.filter.clone());
    let scores = classify(&mut sess.tape, f, cols, m, m)?;
    let peak = argmax(sess.value(scores));
    let raw = sess.value(scores).data()[peak];
    let confidence = if raw.is_finite() { raw.clamp(0.0, 1.0) } else { 0.0 };
    let deltas_var = regression_deltas(&mut sess, cols, peak, &model.head)?;
    let d = sess.value(deltas_var).data();
    let deltas = [d[0], d[1], d[2], d[3]];
    let cols_value = sess.value(cols).clone();
    drop(sess);

    let prev = tf.box_to_patch(&state.current_box);
    let (fw, fh) = (rgb.width as f64, rgb.height as f64);
    let patch_box = if deltas.iter().all(|v| v.is_finite()) {
        regress_bbox(deltas, (peak / m, peak % m), cfg.stride(), &prev, (patch as f64, patch as f64))
    } else {
        prev
    };
    let new_box = tf.box_to_frame(&patch_box).clamp_to(fw, fh, 1.0);

    if confidence > state.config.confidence_gate {
        let sample = MemorySample {
            cols: cols_value,
            labels: model.labels_for(&patch_box)?,
            initial: false,
        };
        let room = state.memory.len() < state.config.memory_capacity;
        let evict = state.memory.iter().position(|s| !s.initial);
        match (room, evict) {
            (true, _) => state.memory.push(sample),
            (false, Some(i)) => {
                state.memory.remove(i);
                state.memory.push(sample);
            }
            (false, None) => {}
        }
        state.filter = fit_filter(model, &state.memory, Some(&state.filter), state.config.refine_steps)?;
    }
    state.current_box = new_box;
    state.last_confidence = confidence;
    state.frame_size = (rgb.width, rgb.height);
    Ok((new_box, confidence))
}

/// Tracks a whole sequence from its first ground-truth box. Frame 0 reports
/// the initial box with confidence 1.
pub fn track_sequence(model: &Model, seq: &Sequence, cfg: &TrackerConfig) -> Result<Vec<(BBox, f64)>> {
    let init = seq
        .groundtruth
        .first()
        .copied()
        .flatten()
        .ok_or_else(|| Error::InvalidArgument("the target is not visible in the first frame".into()))?;
    let mut state = init_tracker(model, &seq.rgb[0], &seq.depth[0], &init, cfg)?;
    let mut out = Vec::with_capacity(seq.len());
    out.push((state.current_box, 1.0));
    for t in 1..seq.len() {
        out.push(track_step(model, &mut state, &seq.rgb[t], &seq.depth[t])?);
    }
    Ok(out)
}
