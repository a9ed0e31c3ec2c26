use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{depth_at, jitter_color, Background, ObjectSpec, SceneSpec, ShapeKind};
use super::{DepthFrame, RgbFrame, Sequence};
use crate::bbox::BBox;
use crate::error::Result;

/// A target whose hidden fraction exceeds this is reported as not visible.
pub const OCCLUSION_INVISIBLE_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy)]
struct Placed {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    depth: u16,
    shape: ShapeKind,
}

impl Placed {
    /// Pixel `(x, y)` is covered when its centre lies inside the shape.
    fn covers(&self, x: i64, y: i64) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / (0.5 * self.w);
        let dy = (y as f64 + 0.5 - self.cy) / (0.5 * self.h);
        match self.shape {
            ShapeKind::Disk => dx * dx + dy * dy <= 1.0,
            ShapeKind::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        }
    }

    /// Integer pixel range that can possibly be covered (unclipped).
    fn pixel_bounds(&self) -> (i64, i64, i64, i64) {
        (
            (self.cx - 0.5 * self.w).floor() as i64 - 1,
            (self.cy - 0.5 * self.h).floor() as i64 - 1,
            (self.cx + 0.5 * self.w).ceil() as i64 + 1,
            (self.cy + 0.5 * self.h).ceil() as i64 + 1,
        )
    }
}

struct Mover {
    spec: ObjectSpec,
    pos: (f64, f64),
    vel: (f64, f64),
}

impl Mover {
    fn new(spec: &ObjectSpec) -> Self {
        Mover {
            pos: spec.start,
            vel: spec.velocity,
            spec: spec.clone(),
        }
    }

    fn placed(&self, frame: usize) -> Placed {
        let depth = depth_at(&self.spec, frame);
        let scale = self.spec.depth_mm / depth;
        Placed {
            cx: self.pos.0,
            cy: self.pos.1,
            w: (self.spec.width * scale).max(1.0),
            h: (self.spec.height * scale).max(1.0),
            depth: depth.round() as u16,
            shape: self.spec.shape,
        }
    }

    fn advance(&mut self, frame: usize, width: f64, height: f64, rng: &mut ChaCha8Rng) {
        if let Some(n) = self.spec.turn_every {
            if frame > 0 && frame % n == 0 {
                let a: f64 = rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
                let (s, c) = a.sin_cos();
                self.vel = (c * self.vel.0 - s * self.vel.1, s * self.vel.0 + c * self.vel.1);
            }
        }
        self.pos.0 += self.vel.0;
        self.pos.1 += self.vel.1;
        if self.spec.bounce {
            let p = self.placed(frame + 1);
            let (hw, hh) = (0.5 * p.w, 0.5 * p.h);
            reflect(&mut self.pos.0, &mut self.vel.0, hw, width - hw);
            reflect(&mut self.pos.1, &mut self.vel.1, hh, height - hh);
        }
    }
}

fn reflect(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        *p = 0.5 * (lo + hi);
        return;
    }
    if *p < lo {
        *p = 2.0 * lo - *p;
        *v = v.abs();
    } else if *p > hi {
        *p = 2.0 * hi - *p;
        *v = -v.abs();
    }
    *p = p.clamp(lo, hi);
}

/// Renders `spec` deterministically. `seed` drives background clutter and
/// direction changes; everything else is fixed by the `SceneSpec`.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Sequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let bg_depth = spec.background_depth_mm.round() as u16;
    let background = render_background(spec, &mut rng);

    let mut target = Mover::new(&spec.target);
    let mut distractors: Vec<Mover> = spec.distractors.iter().map(Mover::new).collect();

    let mut seq = Sequence {
        width: w,
        height: h,
        seed,
        rgb: Vec::with_capacity(spec.length),
        depth: Vec::with_capacity(spec.length),
        groundtruth: Vec::with_capacity(spec.length),
        tags: spec.tags.clone(),
    };

    for t in 0..spec.length {
        let mut rgb = background.clone();
        let mut depth = vec![bg_depth; w * h];
        // Owner per pixel: 0 = background/other, 1 = target.
        let mut owner = vec![false; w * h];

        let tp = target.placed(t);
        let mut paint = |p: &Placed, color: [u8; 3], is_target: bool, depth: &mut [u16], rgb: &mut [u8]| {
            let (x0, y0, x1, y1) = p.pixel_bounds();
            for y in y0.max(0)..y1.min(h as i64) {
                for x in x0.max(0)..x1.min(w as i64) {
                    if !p.covers(x, y) {
                        continue;
                    }
                    let i = y as usize * w + x as usize;
                    if p.depth < depth[i] {
                        depth[i] = p.depth;
                        rgb[3 * i..3 * i + 3].copy_from_slice(&color);
                        owner[i] = is_target;
                    }
                }
            }
        };

        paint(&tp, spec.target.color, true, &mut depth, &mut rgb);
        for d in &distractors {
            paint(&d.placed(t), d.spec.color, false, &mut depth, &mut rgb);
        }
        for o in spec.occluders.iter().filter(|o| (o.start_frame..o.end_frame).contains(&t)) {
            let p = Placed {
                cx: o.x + 0.5 * o.width,
                cy: o.y + 0.5 * o.height,
                w: o.width,
                h: o.height,
                depth: o.depth_mm.round() as u16,
                shape: ShapeKind::Rectangle,
            };
            paint(&p, o.color, false, &mut depth, &mut rgb);
        }

        seq.groundtruth.push(target_box(&tp, &owner, w, h));
        if spec.illumination != 1.0 {
            for v in &mut rgb {
                *v = (f64::from(*v) * spec.illumination).round().clamp(0.0, 255.0) as u8;
            }
        }
        seq.rgb.push(RgbFrame { width: w, height: h, data: rgb });
        seq.depth.push(DepthFrame { width: w, height: h, data: depth });

        target.advance(t, w as f64, h as f64, &mut rng);
        for d in &mut distractors {
            d.advance(t, w as f64, h as f64, &mut rng);
        }
    }
    Ok(seq)
}

/// Tight box of the full silhouette clipped to the frame, or `None` when
/// more than [`OCCLUSION_INVISIBLE_FRACTION`] of the silhouette is hidden
/// (occluded or out of frame).
fn target_box(p: &Placed, owner: &[bool], w: usize, h: usize) -> Option<BBox> {
    let (x0, y0, x1, y1) = p.pixel_bounds();
    let mut total = 0usize;
    let mut shown = 0usize;
    let (mut bx0, mut by0, mut bx1, mut by1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for y in y0..y1 {
        for x in x0..x1 {
            if !p.covers(x, y) {
                continue;
            }
            total += 1;
            let inside = x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h;
            if !inside {
                continue;
            }
            if owner[y as usize * w + x as usize] {
                shown += 1;
            }
            bx0 = bx0.min(x);
            by0 = by0.min(y);
            bx1 = bx1.max(x + 1);
            by1 = by1.max(y + 1);
        }
    }
    if total == 0 || shown == 0 {
        return None;
    }
    let hidden = 1.0 - shown as f64 / total as f64;
    if hidden > OCCLUSION_INVISIBLE_FRACTION {
        return None;
    }
    Some(BBox::new(bx0 as f64, by0 as f64, (bx1 - bx0) as f64, (by1 - by0) as f64))
}

fn render_background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (w, h) = (spec.width, spec.height);
    let mut rgb = Vec::with_capacity(3 * w * h);
    match &spec.background {
        Background::Plain { color } => {
            for _ in 0..w * h {
                rgb.extend_from_slice(color);
            }
        }
        Background::Clutter { base, palette, blobs } => {
            for _ in 0..w * h {
                rgb.extend_from_slice(base);
            }
            for _ in 0..*blobs {
                let bw = rng.gen_range(6..=(w / 4).max(7));
                let bh = rng.gen_range(6..=(h / 4).max(7));
                let x0 = rng.gen_range(0..w);
                let y0 = rng.gen_range(0..h);
                let c = if palette.is_empty() {
                    *base
                } else {
                    palette[rng.gen_range(0..palette.len())]
                };
                let c = jitter_color(rng, c, 30);
                for y in y0..(y0 + bh).min(h) {
                    for x in x0..(x0 + bw).min(w) {
                        let i = 3 * (y * w + x);
                        rgb[i..i + 3].copy_from_slice(&c);
                    }
                }
            }
        }
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{OccluderSpec, Preset};

    #[test]
    fn reflect_keeps_position_in_range() {
        let (mut p, mut v) = (-3.0, -2.0);
        reflect(&mut p, &mut v, 0.0, 10.0);
        assert_eq!((p, v), (3.0, 2.0));
        let (mut p, mut v) = (12.0, 1.0);
        reflect(&mut p, &mut v, 0.0, 10.0);
        assert_eq!((p, v), (8.0, -1.0));
    }

    #[test]
    fn disk_box_is_tight() {
        let mut s = SceneSpec::preset(Preset::Easy, 0);
        s.target.shape = ShapeKind::Disk;
        s.target.start = (50.0, 40.0);
        s.target.width = 10.0;
        s.target.height = 10.0;
        s.target.velocity = (0.0, 0.0);
        s.length = 1;
        let seq = generate(&s, 0).unwrap();
        let b = seq.groundtruth[0].unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (45.0, 35.0, 10.0, 10.0));
    }

    #[test]
    fn half_occlusion_stays_visible() {
        let mut s = SceneSpec::preset(Preset::Easy, 2);
        s.target.shape = ShapeKind::Rectangle;
        s.target.start = (50.0, 40.0);
        s.target.width = 20.0;
        s.target.height = 20.0;
        s.target.velocity = (0.0, 0.0);
        s.length = 2;
        s.occluders.push(OccluderSpec {
            x: 0.0,
            y: 0.0,
            width: 50.0,
            height: 120.0,
            depth_mm: 500.0,
            color: [0, 0, 0],
            start_frame: 1,
            end_frame: 2,
        });
        let seq = generate(&s, 0).unwrap();
        assert_eq!(seq.groundtruth[0], seq.groundtruth[1]);
    }
}
