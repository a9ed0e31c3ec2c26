use super::{DepthFrame, RgbFrame};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Default depth range (mm) mapped onto `[0, 1]`.
pub const DEFAULT_MAX_DEPTH_MM: f64 = 10_000.0;

/// Affine map between frame and patch coordinates: `patch = (frame - origin) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale: f64,
}

impl CropTransform {
    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin_x) * self.scale, (y - self.origin_y) * self.scale)
    }

    pub fn to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.scale + self.origin_x, y / self.scale + self.origin_y)
    }

    pub fn box_to_patch(&self, b: &BBox) -> BBox {
        let (x, y) = self.to_patch(b.x, b.y);
        BBox::new(x, y, b.w * self.scale, b.h * self.scale)
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (x, y) = self.to_frame(b.x, b.y);
        BBox::new(x, y, b.w / self.scale, b.h / self.scale)
    }
}

/// `[3, H, W]` tensor with values in `[0, 1]`.
pub fn rgb_to_tensor(frame: &RgbFrame) -> Tensor {
    let n = frame.width * frame.height;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in frame.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, frame.height, frame.width], data).expect("frame extents are positive")
}

/// `[1, H, W]` tensor of depth divided by `max_depth_mm` and clamped to `[0, 1]`.
pub fn depth_to_tensor(frame: &DepthFrame, max_depth_mm: f64) -> Tensor {
    let data = frame
        .data
        .iter()
        .map(|&d| (f64::from(d) / max_depth_mm).clamp(0.0, 1.0))
        .collect();
    Tensor::new(&[1, frame.height, frame.width], data).expect("frame extents are positive")
}

/// Square crop of side `side_factor * sqrt(w * h)` centred on `bbox`, resized
/// to `out_size` x `out_size`. A side factor of 5 covers 5^2 times the box area.
pub fn crop(image: &Tensor, bbox: &BBox, side_factor: f64, out_size: usize) -> Result<(Tensor, CropTransform)> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) || !bbox.is_finite() {
        return Err(Error::InvalidArgument(format!("cannot crop around degenerate box {bbox:?}")));
    }
    if !(side_factor > 0.0) {
        return Err(Error::InvalidArgument(format!("crop side factor must be positive, got {side_factor}")));
    }
    let side = side_factor * (bbox.w * bbox.h).sqrt();
    crop_square(image, bbox.center(), side, out_size)
}

/// Square region of `side` pixels centred at `center`, bilinearly resampled.
/// Samples outside the frame take the nearest edge value.
pub fn crop_square(image: &Tensor, center: (f64, f64), side: f64, out_size: usize) -> Result<(Tensor, CropTransform)> {
    let [c, h, w] = match image.shape() {
        &[c, h, w] => [c, h, w],
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "crop expects a C x H x W image".into(),
            })
        }
    };
    if !(side > 0.0 && side.is_finite()) || out_size == 0 {
        return Err(Error::InvalidArgument(format!("bad crop side {side} or output size {out_size}")));
    }
    let tf = CropTransform {
        origin_x: center.0 - 0.5 * side,
        origin_y: center.1 - 0.5 * side,
        scale: out_size as f64 / side,
    };
    // Separable taps: for each output column/row, two source indices and a weight.
    let taps = |n_src: usize, origin: f64| -> Vec<(usize, usize, f64)> {
        (0..out_size)
            .map(|i| {
                let f = origin + (i as f64 + 0.5) / tf.scale - 0.5;
                let f0 = f.floor();
                let t = f - f0;
                let clamp = |v: f64| v.clamp(0.0, (n_src - 1) as f64) as usize;
                (clamp(f0), clamp(f0 + 1.0), t)
            })
            .collect()
    };
    let xs = taps(w, tf.origin_x);
    let ys = taps(h, tf.origin_y);
    let src = image.data();
    let mut out = vec![0.0; c * out_size * out_size];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_size * out_size..(ch + 1) * out_size * out_size];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                dst[oy * out_size + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Ok((Tensor::new(&[c, out_size, out_size], out)?, tf))
}
