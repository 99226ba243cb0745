//! Axis-aligned boxes in normalized center/size form.

use serde::{Deserialize, Serialize};

/// Box given by its center and size, in units of image width/height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Corners clipped to the unit square.
    pub fn clipped(&self) -> Self {
        let (x1, y1, x2, y2) = self.corners();
        Self::from_corners(x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0))
    }

    pub fn flipped_horizontally(&self) -> Self {
        Self { cx: 1.0 - self.cx, ..*self }
    }
}

/// Intersection over union; 0 when either box has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    // Areas from the same corners as the intersection so identical boxes give exactly 1.
    let area_a = (ax2 - ax1).max(0.0) * (ay2 - ay1).max(0.0);
    let area_b = (bx2 - bx1).max(0.0) * (by2 - by1).max(0.0);
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_reference_cases() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(0.1, 0.1, 0.1, 0.1)), 0.0);
        // unit squares shifted by half a side: inter 0.5, union 1.5
        let u = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let v = BBox::from_corners(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&u, &v) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &BBox::new(0.5, 0.5, 0.0, 0.3)), 0.0);
    }

    #[test]
    fn clipping_keeps_box_inside() {
        let b = BBox::new(0.95, 0.05, 0.2, 0.2).clipped();
        let (x1, y1, x2, y2) = b.corners();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 + 1e-12 && y2 <= 1.0 + 1e-12);
        assert!((b.w - 0.15).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            a in (0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.5, 0.01f64..0.5),
            b in (0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.5, 0.01f64..0.5),
        ) {
            let a = BBox::new(a.0, a.1, a.2, a.3);
            let b = BBox::new(b.0, b.1, b.2, b.3);
            let x = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert!((x - iou(&b, &a)).abs() < 1e-12);
        }
    }
}
