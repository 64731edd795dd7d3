//! Axis-aligned boxes in corner form and their overlap arithmetic.

use serde::{Deserialize, Serialize};

/// Axis-aligned box with corner coordinates, `x2 >= x1` and `y2 >= y1` for
/// non-degenerate boxes. Degenerate boxes have zero area and zero overlap
/// with everything.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Intersection area with another box.
    pub fn intersection(&self, other: &Box2D) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union. Degenerate pairs (zero union) score 0.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
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

    #[test]
    fn unit_offset_squares_overlap_by_exactly_one_seventh() {
        // 2×2 squares offset by (1,1): intersection 1, union 4+4−1=7.
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0);
        let b = Box2D::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou(&a, &b), 1.0 / 7.0);
    }

    #[test]
    fn identical_boxes_have_iou_one_and_disjoint_zero() {
        let a = Box2D::new(0.0, 0.0, 4.0, 3.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = Box2D::new(10.0, 10.0, 11.0, 11.0);
        assert_eq!(iou(&a, &far), 0.0);
    }

    #[test]
    fn degenerate_boxes_never_overlap() {
        let line = Box2D::new(1.0, 0.0, 1.0, 5.0);
        let a = Box2D::new(0.0, 0.0, 4.0, 4.0);
        assert_eq!(line.area(), 0.0);
        assert_eq!(iou(&line, &a), 0.0);
        assert_eq!(iou(&line, &line), 0.0);
    }

    #[test]
    fn touching_boxes_have_zero_intersection() {
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0);
        let b = Box2D::new(2.0, 0.0, 4.0, 2.0);
        assert_eq!(iou(&a, &b), 0.0);
    }
}
