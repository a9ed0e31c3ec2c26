use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Challenge attributes a scene can exhibit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    /// Background clutter.
    BC,
    /// Dark scene.
    DS,
    /// Similar objects.
    SO,
    /// Fast motion.
    FM,
    /// Partial occlusion.
    PO,
    /// Depth change.
    DC,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::BC,
        Attribute::DS,
        Attribute::SO,
        Attribute::FM,
        Attribute::PO,
        Attribute::DC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::BC => "BC",
            Attribute::DS => "DS",
            Attribute::SO => "SO",
            Attribute::FM => "FM",
            Attribute::PO => "PO",
            Attribute::DC => "DC",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attribute tag `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
}

/// A moving object. Sizes are at the starting depth and scale with
/// `start_depth / depth` as the object moves in depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub color: [u8; 3],
    pub width: f64,
    pub height: f64,
    pub depth_mm: f64,
    /// Centre at frame 0.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Millimetres per frame.
    pub depth_velocity: f64,
    /// Rotate the velocity by a random angle every this many frames.
    pub turn_every: Option<usize>,
    /// Reflect off the frame borders; otherwise objects may leave the frame.
    pub bounce: bool,
}

/// Static rectangle present during `[start_frame, end_frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccluderSpec {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    pub depth_mm: f64,
    pub color: [u8; 3],
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Background {
    Plain { color: [u8; 3] },
    /// Random rectangles; `blobs` of them, colours drawn near `palette`.
    Clutter { base: [u8; 3], palette: Vec<[u8; 3]>, blobs: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub target: ObjectSpec,
    pub distractors: Vec<ObjectSpec>,
    pub occluders: Vec<OccluderSpec>,
    /// Multiplies every RGB value; below 1 darkens the scene.
    pub illumination: f64,
    pub background: Background,
    pub background_depth_mm: f64,
    pub tags: Vec<Attribute>,
}

/// Named scene families used for training and evaluation corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// One slow target on a plain background.
    Easy,
    /// Dark, cluttered scene with target-like distractors at other depths.
    DistractorDark,
    FastMotion,
    Occlusion,
    DepthChange,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "easy" => Preset::Easy,
            "distractor_dark" => Preset::DistractorDark,
            "fast_motion" => Preset::FastMotion,
            "occlusion" => Preset::Occlusion,
            "depth_change" => Preset::DepthChange,
            other => return Err(Error::InvalidArgument(format!("unknown preset `{other}`"))),
        })
    }
}

pub(crate) const MIN_SPEED_FAST: f64 = 3.0;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("invalid scene: {m}")));
        if self.width < 8 || self.height < 8 || self.length == 0 {
            return bad(format!("frame {}x{} x {}", self.width, self.height, self.length));
        }
        if !(self.illumination > 0.0 && self.illumination <= 4.0) {
            return bad(format!("illumination {}", self.illumination));
        }
        if !(self.background_depth_mm > 0.0 && self.background_depth_mm < 65535.0) {
            return bad(format!("background depth {}", self.background_depth_mm));
        }
        for (i, o) in std::iter::once(&self.target).chain(&self.distractors).enumerate() {
            let finite = [o.width, o.height, o.depth_mm, o.start.0, o.start.1, o.velocity.0, o.velocity.1, o.depth_velocity]
                .iter()
                .all(|v| v.is_finite());
            if !finite || o.width < 1.0 || o.height < 1.0 || o.depth_mm <= 0.0 || o.depth_mm >= 65535.0 {
                return bad(format!("object {i} has non-renderable geometry"));
            }
            if o.turn_every == Some(0) {
                return bad(format!("object {i} turns every 0 frames"));
            }
        }
        let nearest_target = self.target.depth_mm.min(self.target_depth_at(self.length - 1));
        for (i, o) in self.occluders.iter().enumerate() {
            if o.width < 1.0 || o.height < 1.0 || o.start_frame >= o.end_frame {
                return bad(format!("occluder {i} has empty extent or window"));
            }
            if o.depth_mm <= 0.0 || o.depth_mm >= nearest_target {
                return bad(format!("occluder {i} is not in front of the target"));
            }
        }
        for t in &self.tags {
            let ok = match t {
                Attribute::PO => !self.occluders.is_empty(),
                Attribute::SO => !self.distractors.is_empty(),
                Attribute::DS => self.illumination < 0.5,
                Attribute::BC => matches!(self.background, Background::Clutter { .. }),
                Attribute::FM => self.target.velocity.0.hypot(self.target.velocity.1) >= MIN_SPEED_FAST,
                Attribute::DC => self.target.depth_velocity != 0.0,
            };
            if !ok {
                return bad(format!("tag {t} is not supported by the scene contents"));
            }
        }
        Ok(())
    }

    pub(crate) fn target_depth_at(&self, frame: usize) -> f64 {
        depth_at(&self.target, frame)
    }

    /// Scene drawn from a preset family; `seed` picks the variation.
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce4e);
        let (width, height, length) = (160, 120, 40);
        let mut spec = SceneSpec {
            width,
            height,
            length,
            target: random_target(&mut rng, width, height, 1.2),
            distractors: Vec::new(),
            occluders: Vec::new(),
            illumination: 1.0,
            background: Background::Plain {
                color: random_muted(&mut rng),
            },
            background_depth_mm: rng.gen_range(4500.0..6500.0),
            tags: Vec::new(),
        };
        match preset {
            Preset::Easy => {}
            Preset::DistractorDark => {
                let base = random_muted(&mut rng);
                spec.background = Background::Clutter {
                    base,
                    palette: vec![spec.target.color, base],
                    blobs: 14,
                };
                spec.illumination = rng.gen_range(0.25..0.4);
                for _ in 0..2 {
                    let mut d = random_target(&mut rng, width, height, 1.2);
                    d.shape = spec.target.shape;
                    d.color = jitter_color(&mut rng, spec.target.color, 12);
                    d.width = spec.target.width;
                    d.height = spec.target.height;
                    d.depth_mm = spec.target.depth_mm + rng.gen_range(1200.0..2200.0);
                    spec.distractors.push(d);
                }
                spec.tags = vec![Attribute::BC, Attribute::DS, Attribute::SO];
            }
            Preset::FastMotion => {
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let speed = rng.gen_range(MIN_SPEED_FAST..4.5);
                spec.target.velocity = (speed * angle.cos(), speed * angle.sin());
                spec.tags = vec![Attribute::FM];
            }
            Preset::Occlusion => {
                let t = &spec.target;
                let (w, h) = (t.width * 2.0, height as f64);
                spec.occluders.push(OccluderSpec {
                    x: (t.start.0 + 6.0 * t.velocity.0 - 0.5 * w).clamp(0.0, width as f64 - w),
                    y: 0.0,
                    width: w,
                    height: h,
                    depth_mm: t.depth_mm * 0.5,
                    color: random_muted(&mut rng),
                    start_frame: 12,
                    end_frame: 20,
                });
                spec.tags = vec![Attribute::PO];
            }
            Preset::DepthChange => {
                spec.target.depth_velocity = rng.gen_range(15.0..30.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                spec.tags = vec![Attribute::DC];
            }
        }
        spec
    }
}

pub(crate) fn depth_at(o: &ObjectSpec, frame: usize) -> f64 {
    (o.depth_mm + o.depth_velocity * frame as f64).clamp(300.0, 60000.0)
}

fn random_target(rng: &mut ChaCha8Rng, width: usize, height: usize, max_speed: f64) -> ObjectSpec {
    let size = rng.gen_range(18.0..26.0);
    let aspect: f64 = rng.gen_range(0.8..1.25);
    let shape = if rng.gen_bool(0.5) {
        ShapeKind::Disk
    } else {
        ShapeKind::Rectangle
    };
    let (w, h) = match shape {
        ShapeKind::Disk => (size, size),
        ShapeKind::Rectangle => (size * aspect.sqrt(), size / aspect.sqrt()),
    };
    let margin = 0.5 * size + 4.0;
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen_range(0.3..max_speed);
    ObjectSpec {
        shape,
        color: random_saturated(rng),
        width: w,
        height: h,
        depth_mm: rng.gen_range(1400.0..2600.0),
        start: (
            rng.gen_range(margin..width as f64 - margin),
            rng.gen_range(margin..height as f64 - margin),
        ),
        velocity: (speed * angle.cos(), speed * angle.sin()),
        depth_velocity: 0.0,
        turn_every: None,
        bounce: true,
    }
}

fn random_saturated(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut c = [rng.gen_range(20..80), rng.gen_range(20..80), rng.gen_range(20..80)];
    let hi = rng.gen_range(0..3);
    c[hi] = rng.gen_range(200..=255);
    c
}

fn random_muted(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let g: u8 = rng.gen_range(90..150);
    [
        g.saturating_add(rng.gen_range(0..20)),
        g.saturating_add(rng.gen_range(0..20)),
        g.saturating_add(rng.gen_range(0..20)),
    ]
}

pub(crate) fn jitter_color(rng: &mut ChaCha8Rng, c: [u8; 3], amount: i32) -> [u8; 3] {
    c.map(|v| (i32::from(v) + rng.gen_range(-amount..=amount)).clamp(0, 255) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [
            Preset::Easy,
            Preset::DistractorDark,
            Preset::FastMotion,
            Preset::Occlusion,
            Preset::DepthChange,
        ] {
            for seed in 0..5 {
                SceneSpec::preset(p, seed).validate().unwrap();
            }
        }
    }

    #[test]
    fn tags_must_match_contents() {
        let mut s = SceneSpec::preset(Preset::Easy, 1);
        s.tags = vec![Attribute::PO];
        assert!(s.validate().is_err());
        s.tags = vec![Attribute::DS];
        assert!(s.validate().is_err());
    }

    #[test]
    fn occluder_behind_target_is_rejected() {
        let mut s = SceneSpec::preset(Preset::Occlusion, 3);
        s.occluders[0].depth_mm = s.target.depth_mm + 10.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn attribute_round_trip() {
        for a in Attribute::ALL {
            assert_eq!(a.as_str().parse::<Attribute>().unwrap(), a);
        }
        assert!("XX".parse::<Attribute>().is_err());
    }
}
