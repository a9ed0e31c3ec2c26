//! Training loop and online tracking runtime.

mod optim;
mod tracker;
mod train;

pub use optim::{lr_at, AdamW};
pub use tracker::{init_tracker, track_sequence, track_step, MemorySample, TrackerConfig, TrackerState};
pub use train::{format_loss_log, make_training_pair, train, EpochLog, LOSS_LOG_HEADER};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::synthdata::{crop_square, depth_to_tensor, rgb_to_tensor, CropTransform, DepthFrame, RgbFrame};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_period_epochs: usize,
    pub weight_decay: f64,
    pub lambda: f64,
    /// Crop area as a multiple of the target area.
    pub crop_area_factor: f64,
    pub patch_size: usize,
    pub seed: u64,
    /// Template centre jitter as a fraction of the box size.
    pub template_jitter: f64,
    /// Search centre jitter as a fraction of the box size.
    pub search_jitter: f64,
    /// Search prior log-size jitter.
    pub search_scale_jitter: f64,
    pub max_frame_gap: usize,
    pub flip_probability: f64,
    pub brightness_range: (f64, f64),
    pub max_depth_mm: f64,
    /// Worker threads for per-pair gradients; results do not depend on it.
    pub jobs: usize,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 20,
            pairs_per_epoch: 200,
            batch_size: 4,
            learning_rate: 1e-3,
            lr_decay_factor: 0.2,
            lr_decay_period_epochs: 15,
            weight_decay: 1e-4,
            lambda: 1e-2,
            crop_area_factor: 25.0,
            patch_size: 96,
            seed,
            template_jitter: 0.1,
            search_jitter: 0.5,
            search_scale_jitter: 0.15,
            max_frame_gap: 8,
            flip_probability: 0.5,
            brightness_range: (0.8, 1.2),
            max_depth_mm: crate::synthdata::DEFAULT_MAX_DEPTH_MM,
            jobs: 1,
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self {
            patch_size: 288,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("pairs_per_epoch", self.pairs_per_epoch as f64),
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("lr_decay_period_epochs", self.lr_decay_period_epochs as f64),
            ("crop_area_factor", self.crop_area_factor),
            ("patch_size", self.patch_size as f64),
            ("max_depth_mm", self.max_depth_mm),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("`{name}` must be positive, got {v}")));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "`lr_decay_factor` must lie in (0, 1), got {}",
                self.lr_decay_factor
            )));
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("template_jitter", self.template_jitter),
            ("search_jitter", self.search_jitter),
            ("search_scale_jitter", self.search_scale_jitter),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument(format!("`{name}` must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::InvalidArgument("`flip_probability` must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.brightness_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(format!("bad brightness range ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Photometric/geometric augmentation of one patch pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub flip: bool,
    /// Multiplies RGB values; the result is clamped to `[0, 1]`.
    pub brightness: f64,
}

impl Augment {
    pub const IDENTITY: Augment = Augment {
        flip: false,
        brightness: 1.0,
    };
}

/// Mirrors every channel of a `C x H x W` tensor left-right.
pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let s = t.shape();
    let w = s[s.len() - 1];
    let mut out = t.clone();
    for (dst, src) in out.data_mut().chunks_exact_mut(w).zip(t.data().chunks_exact(w)) {
        for (x, v) in dst.iter_mut().enumerate() {
            *v = src[w - 1 - x];
        }
    }
    out
}

/// Crops matching RGB and depth patches. Depth is normalised by
/// `max_depth_mm` and replicated to three channels.
pub fn patch_pair(
    rgb: &RgbFrame,
    depth: &DepthFrame,
    center: (f64, f64),
    side: f64,
    out: usize,
    max_depth_mm: f64,
    aug: Augment,
) -> Result<(Tensor, Tensor, CropTransform)> {
    let (rgb_patch, tf) = crop_square(&rgb_to_tensor(rgb), center, side, out)?;
    let (depth_patch, _) = crop_square(&depth_to_tensor(depth, max_depth_mm), center, side, out)?;
    let mut rgb_patch = if aug.brightness == 1.0 {
        rgb_patch
    } else {
        rgb_patch.map(|v| (v * aug.brightness).clamp(0.0, 1.0))
    };
    let d = depth_patch.data();
    let mut depth3 = Vec::with_capacity(3 * d.len());
    for _ in 0..3 {
        depth3.extend_from_slice(d);
    }
    let mut depth_patch = Tensor::new(&[3, out, out], depth3)?;
    if aug.flip {
        rgb_patch = flip_horizontal(&rgb_patch);
        depth_patch = flip_horizontal(&depth_patch);
    }
    Ok((rgb_patch, depth_patch, tf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_twice_is_identity() {
        let t = Tensor::new(&[2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let f = flip_horizontal(&t);
        assert_eq!(&f.data()[..3], &[2.0, 1.0, 0.0]);
        assert_eq!(flip_horizontal(&f), t);
    }

    #[test]
    fn desk_config_validates() {
        TrainConfig::desk(0).validate().unwrap();
        let mut c = TrainConfig::desk(0);
        c.lr_decay_factor = 1.0;
        assert!(c.validate().is_err());
    }
}
