//! Anchor grids over the detector's feature strides.
//!
//! Anchors live in normalized [0,1] image coordinates so they are
//! independent of pixel resolution. Each feature cell carries one anchor per
//! (scale, ratio) pair; a scale is the anchor's side length in stride units,
//! and the aspect ratio tilts width against height at constant area.

use serde::{Deserialize, Serialize};

use crate::geom::Box2D;

/// Center-size anchor in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn corners(&self) -> Box2D {
        Box2D::new(
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

/// Per-cell anchor shapes shared by every stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Side length in units of the feature stride.
    pub scales: Vec<f64>,
    /// Width/height aspect ratios applied at constant area.
    pub ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            scales: vec![2.0, 3.0],
            ratios: vec![1.0, 2.0],
        }
    }
}

impl AnchorSpec {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Lay anchors over one feature grid.
///
/// Ordering is row-major over cells, then scales-major over the per-cell
/// shapes — the same order the head convolutions are flattened in.
pub fn grid_anchors(
    image_hw: (usize, usize),
    stride: usize,
    feature_hw: (usize, usize),
    spec: &AnchorSpec,
) -> Vec<Anchor> {
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let (fh, fw) = feature_hw;
    let mut anchors = Vec::with_capacity(fh * fw * spec.per_cell());
    for y in 0..fh {
        for x in 0..fw {
            let cx = (x as f64 + 0.5) * stride as f64 / iw;
            let cy = (y as f64 + 0.5) * stride as f64 / ih;
            for &scale in &spec.scales {
                for &ratio in &spec.ratios {
                    let side = scale * stride as f64;
                    let w = side * ratio.sqrt() / iw;
                    let h = side / ratio.sqrt() / ih;
                    anchors.push(Anchor { cx, cy, w, h });
                }
            }
        }
    }
    anchors
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_count_and_layout_are_deterministic() {
        let spec = AnchorSpec::default();
        let a = grid_anchors((48, 48), 8, (6, 6), &spec);
        assert_eq!(a.len(), 6 * 6 * 4);
        let b = grid_anchors((48, 48), 8, (6, 6), &spec);
        assert_eq!(a, b);
        // First cell is centered half a stride in.
        assert_eq!(a[0].cx, 4.0 / 48.0);
        assert_eq!(a[0].cy, 4.0 / 48.0);
    }

    #[test]
    fn all_anchors_have_positive_finite_extent() {
        let spec = AnchorSpec::default();
        for anchor in grid_anchors((48, 64), 16, (3, 4), &spec) {
            assert!(anchor.w > 0.0 && anchor.h > 0.0);
            assert!(anchor.cx.is_finite() && anchor.cy.is_finite());
        }
    }

    #[test]
    fn ratio_preserves_area() {
        let spec = AnchorSpec {
            scales: vec![2.0],
            ratios: vec![1.0, 2.0],
        };
        let a = grid_anchors((48, 48), 8, (6, 6), &spec);
        let area = |x: &Anchor| x.w * x.h;
        assert!((area(&a[0]) - area(&a[1])).abs() < 1e-12);
        assert!((a[1].w / a[1].h - 2.0).abs() < 1e-12);
    }
}
