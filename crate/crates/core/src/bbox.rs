/// Axis-aligned box in pixels: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Clamp into `[0, width] x [0, height]`, keeping at least `min_size` of extent.
    pub fn clamp_to(&self, width: f64, height: f64, min_size: f64) -> Self {
        let w = self.w.clamp(min_size, width);
        let h = self.h.clamp(min_size, height);
        let x = self.x.clamp(0.0, width - w);
        let y = self.y.clamp(0.0, height - h);
        Self::new(x, y, w, h)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_keeps_box_inside() {
        let b = BBox::new(-10.0, 95.0, 30.0, 20.0).clamp_to(100.0, 100.0, 1.0);
        assert!(b.within(100.0, 100.0));
        assert_eq!((b.w, b.h), (30.0, 20.0));
        assert_eq!((b.x, b.y), (0.0, 80.0));
    }

    #[test]
    fn clamp_shrinks_oversized_box() {
        let b = BBox::new(0.0, 0.0, 500.0, 0.0).clamp_to(100.0, 50.0, 1.0);
        assert_eq!((b.w, b.h), (100.0, 1.0));
        assert!(b.within(100.0, 50.0));
    }
}
