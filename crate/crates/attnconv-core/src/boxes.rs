//! Axis-aligned boxes in normalized center/size form, with IoU and
//! generalized IoU.

use serde::{Deserialize, Serialize};

/// Box as (center x, center y, width, height), all normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Corner form `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_normalized(&self) -> bool {
        let within = |v: f64| (0.0..=1.0).contains(&v);
        within(self.cx) && within(self.cy) && within(self.w) && within(self.h)
    }

    /// Area the two boxes have in common.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        iw * ih
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the smallest enclosing box not
/// covered by the union. Lies in `(-1, 1]`. Identical boxes give 1 even when
/// degenerate (zero area); for distinct zero-area boxes the enclosing box is
/// still positive, so the value stays well defined.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let i = if union <= 0.0 { 0.0 } else { inter / union };
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let cw = ax1.max(bx1) - ax0.min(bx0);
    let ch = ay1.max(by1) - ay0.min(by0);
    let enclose = cw * ch;
    if enclose <= 0.0 {
        return i;
    }
    i - (enclose - union.max(0.0)) / enclose
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_box(rng: &mut ChaCha20Rng) -> BoundingBox {
        let w = rng.gen_range(0.02..0.5);
        let h = rng.gen_range(0.02..0.5);
        BoundingBox::new(
            rng.gen_range(w / 2.0..1.0 - w / 2.0),
            rng.gen_range(h / 2.0..1.0 - h / 2.0),
            w,
            h,
        )
    }

    #[test]
    fn iou_identical_disjoint_half() {
        let a = BoundingBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);

        let far = BoundingBox::new(0.1, 0.1, 0.05, 0.05);
        assert_eq!(iou(&a, &far), 0.0);

        // inter 0.1x0.2 = 0.02, union 0.06 -> 1/3
        let b = BoundingBox::new(0.6, 0.5, 0.2, 0.2);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn giou_identical_is_one() {
        let a = BoundingBox::new(0.3, 0.7, 0.1, 0.2);
        assert_eq!(giou(&a, &a), 1.0);
        // identical zero-area boxes by convention
        let p = BoundingBox::new(0.5, 0.5, 0.0, 0.0);
        assert_eq!(giou(&p, &p), 1.0);
    }

    #[test]
    fn giou_disjoint_worked_example() {
        // IoU 0, enclosing 0.6x0.1 = 0.06, union 0.02 -> -(0.04/0.06) = -2/3
        let a = BoundingBox::new(0.25, 0.5, 0.1, 0.1);
        let b = BoundingBox::new(0.75, 0.5, 0.1, 0.1);
        assert!((giou(&a, &b) - (-2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn giou_bounded_by_iou_and_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for _ in 0..500 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let g = giou(&a, &b);
            assert!(g <= iou(&a, &b) + 1e-12);
            assert!(g > -1.0 && g <= 1.0);
            assert!((g - giou(&b, &a)).abs() < 1e-12);
        }
    }

    #[test]
    fn giou_zero_area_prediction() {
        // degenerate prediction treated as area 0; enclosing box positive
        let gt = BoundingBox::new(0.5, 0.5, 0.2, 0.2);
        let degenerate = BoundingBox::new(0.5, 0.5, 0.0, 0.0);
        let g = giou(&gt, &degenerate);
        assert!(g.is_finite());
        // IoU is 0 (union = gt area), enclosing equals gt box
        assert!((g - 0.0).abs() < 1e-12);
    }
}
