//! Center-size box encoding against anchors.
//!
//! The usual SSD parameterization with variances (0.1, 0.2): centers are
//! offset in units of the anchor size, extents are log-ratios, both divided
//! by their variance so the regression targets share a scale.

use crate::detector::anchors::Anchor;
use crate::geom::Box2D;

/// Variance applied to the center offsets.
pub const VAR_CENTER: f64 = 0.1;
/// Variance applied to the log-size offsets.
pub const VAR_SIZE: f64 = 0.2;

/// Regression target for `gt` (corner form, same coordinate frame as the
/// anchor) against `anchor`.
pub fn encode(gt: &Box2D, anchor: &Anchor) -> [f64; 4] {
    let (gcx, gcy) = gt.center();
    let (gw, gh) = (gt.width(), gt.height());
    [
        (gcx - anchor.cx) / (anchor.w * VAR_CENTER),
        (gcy - anchor.cy) / (anchor.h * VAR_CENTER),
        (gw / anchor.w).ln() / VAR_SIZE,
        (gh / anchor.h).ln() / VAR_SIZE,
    ]
}

/// Invert [`encode`]: regression offsets back to a corner-form box.
pub fn decode(offsets: &[f64; 4], anchor: &Anchor) -> Box2D {
    let cx = offsets[0] * VAR_CENTER * anchor.w + anchor.cx;
    let cy = offsets[1] * VAR_CENTER * anchor.h + anchor.cy;
    let w = anchor.w * (offsets[2] * VAR_SIZE).exp();
    let h = anchor.h * (offsets[3] * VAR_SIZE).exp();
    Box2D::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decode_inverts_encode_to_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let anchor = Anchor {
                cx: rng.gen_range(0.2..0.8),
                cy: rng.gen_range(0.2..0.8),
                w: rng.gen_range(0.05..0.4),
                h: rng.gen_range(0.05..0.4),
            };
            let (x1, y1) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6));
            let gt = Box2D::new(
                x1,
                y1,
                x1 + rng.gen_range(0.05..0.4),
                y1 + rng.gen_range(0.05..0.4),
            );
            let back = decode(&encode(&gt, &anchor), &anchor);
            for (a, b) in back.as_array().iter().zip(gt.as_array().iter()) {
                assert!((a - b).abs() < 1e-6, "{back:?} vs {gt:?}");
            }
        }
    }

    #[test]
    fn anchor_exactly_on_target_encodes_to_zero() {
        let anchor = Anchor {
            cx: 0.5,
            cy: 0.5,
            w: 0.2,
            h: 0.1,
        };
        let t = encode(&anchor.corners(), &anchor);
        // Corner round-trips leave ~1e-15 of rounding in the log terms.
        assert!(t.iter().all(|v| v.abs() < 1e-12), "{t:?}");
    }
}
