//! Deterministic synthetic RGBD sequences.
//!
//! Scenes are rendered with a z-buffer (nearer depth wins per pixel) from a
//! [`SceneSpec`]. All randomness comes from a seeded ChaCha8 stream, so a
//! `(spec, seed)` pair always produces the same bytes.

mod crop;
mod io;
mod render;
mod scene;

pub use crop::{crop, crop_square, depth_to_tensor, rgb_to_tensor, CropTransform, DEFAULT_MAX_DEPTH_MM};
pub use io::{read_annotations, read_sequence, write_sequence};
pub use render::{generate, OCCLUSION_INVISIBLE_FRACTION};
pub use scene::{Attribute, Background, ObjectSpec, OccluderSpec, Preset, SceneSpec, ShapeKind};

use crate::bbox::BBox;

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbFrame {
    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }
}

/// Single-channel depth in millimetres.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub rgb: Vec<RgbFrame>,
    pub depth: Vec<DepthFrame>,
    /// `None` marks a frame where the target is not visible.
    pub groundtruth: Vec<Option<BBox>>,
    pub tags: Vec<Attribute>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn visible(&self, frame: usize) -> bool {
        self.groundtruth[frame].is_some()
    }

    pub fn visibility(&self) -> Vec<bool> {
        self.groundtruth.iter().map(Option::is_some).collect()
    }
}
