use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel units, top-left origin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
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
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn max_side(&self) -> f64 {
        self.w.max(self.h)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox::new(self.x * factor, self.y * factor, self.w * factor, self.h * factor)
    }

    /// Intersects the box with a `width × height` frame, keeping at least
    /// one pixel of extent.
    pub fn clamp_to(&self, width: usize, height: usize) -> BBox {
        let (fw, fh) = (width as f64, height as f64);
        let x0 = self.x.clamp(0.0, fw - 1.0);
        let y0 = self.y.clamp(0.0, fh - 1.0);
        let x1 = self.right().clamp(x0 + 1.0, fw);
        let y1 = self.bottom().clamp(y0 + 1.0, fh);
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&BBox::default(), &BBox::default()), 0.0);
    }

    #[test]
    fn clamp_keeps_box_inside() {
        let b = BBox::new(-10.0, 90.0, 30.0, 40.0).clamp_to(100, 100);
        assert_eq!(b, BBox::new(0.0, 90.0, 20.0, 10.0));
        let far = BBox::new(500.0, 500.0, 3.0, 3.0).clamp_to(100, 100);
        assert!(BBox::new(0.0, 0.0, 100.0, 100.0).contains_box(&far));
        assert!(far.area() >= 1.0);
    }

    proptest! {
        #[test]
        fn iou_is_scale_invariant_and_symmetric(
            x in -50.0..50.0f64, y in -50.0..50.0f64, w in 0.5..40.0f64, h in 0.5..40.0f64,
            dx in -30.0..30.0f64, dy in -30.0..30.0f64, w2 in 0.5..40.0f64, h2 in 0.5..40.0f64,
            s in 0.1..10.0f64,
        ) {
            let a = BBox::new(x, y, w, h);
            let b = BBox::new(x + dx, y + dy, w2, h2);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - iou(&b, &a)).abs() < 1e-12);
            prop_assert!((v - iou(&a.scaled(s), &b.scaled(s))).abs() < 1e-9);
        }
    }
}
