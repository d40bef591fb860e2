//! Axis-aligned boxes in view pixel coordinates.
//!
//! Boxes use the half-open convention `[min, max)`: a box covering the single
//! pixel at (5, 9) is `[5, 9, 6, 10]`. Under this convention the area of an
//! integer box equals its pixel count, so analytic IoU agrees with a
//! pixel-counting oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2 {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Box2 {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Box from center, width and height.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Box2::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn intersection_area(&self, other: &Box2) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        iw * ih
    }

    /// Clip to an image of the given extent, keeping a sliver of positive
    /// area when the box would otherwise collapse.
    pub fn clip(&self, width: f64, height: f64) -> Box2 {
        const MIN_SIDE: f64 = 1e-3;
        let mut x_min = self.x_min.clamp(0.0, width);
        let mut x_max = self.x_max.clamp(0.0, width);
        let mut y_min = self.y_min.clamp(0.0, height);
        let mut y_max = self.y_max.clamp(0.0, height);
        if x_max - x_min < MIN_SIDE {
            let c = ((x_min + x_max) / 2.0).clamp(MIN_SIDE / 2.0, width - MIN_SIDE / 2.0);
            x_min = c - MIN_SIDE / 2.0;
            x_max = c + MIN_SIDE / 2.0;
        }
        if y_max - y_min < MIN_SIDE {
            let c = ((y_min + y_max) / 2.0).clamp(MIN_SIDE / 2.0, height - MIN_SIDE / 2.0);
            y_min = c - MIN_SIDE / 2.0;
            y_max = c + MIN_SIDE / 2.0;
        }
        Box2::new(x_min, y_min, x_max, y_max)
    }

    /// Scale all coordinates by a factor (e.g. image pixels to feature cells).
    pub fn scaled(&self, factor: f64) -> Box2 {
        Box2::new(
            self.x_min * factor,
            self.y_min * factor,
            self.x_max * factor,
            self.y_max * factor,
        )
    }
}

/// Intersection over union of two boxes. 0 for disjoint boxes, 1 iff equal.
pub fn iou(a: &Box2, b: &Box2) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Encode `gt` relative to `anchor` as (dx, dy, dw, dh):
/// offsets of the center normalized by the anchor size and log size ratios.
pub fn encode_box(gt: &Box2, anchor: &Box2) -> Result<[f64; 4]> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if wa <= 0.0 || ha <= 0.0 {
        return Err(Error::invalid(
            "encode_box",
            format!("anchor has nonpositive size {wa}x{ha}"),
        ));
    }
    let (cxa, cya) = anchor.center();
    let (cx, cy) = gt.center();
    Ok([
        (cx - cxa) / wa,
        (cy - cya) / ha,
        (gt.width() / wa).ln(),
        (gt.height() / ha).ln(),
    ])
}

/// Inverse of [`encode_box`]. The result is not clipped; callers clip to the
/// image when decoding proposals.
pub fn decode_box(anchor: &Box2, t: &[f64; 4]) -> Result<Box2> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if wa <= 0.0 || ha <= 0.0 {
        return Err(Error::invalid(
            "decode_box",
            format!("anchor has nonpositive size {wa}x{ha}"),
        ));
    }
    let (cxa, cya) = anchor.center();
    let cx = cxa + t[0] * wa;
    let cy = cya + t[1] * ha;
    let w = wa * t[2].exp();
    let h = ha * t[3].exp();
    Ok(Box2::from_center(cx, cy, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let b = Box2::new(2.0, 3.0, 7.0, 9.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = Box2::new(0.0, 0.0, 2.0, 2.0);
        let b = Box2::new(5.0, 5.0, 7.0, 7.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_hand_case() {
        // [0,0,2,2] vs [1,0,3,2]: intersection 2, union 6.
        let a = Box2::new(0.0, 0.0, 2.0, 2.0);
        let b = Box2::new(1.0, 0.0, 3.0, 2.0);
        let v = iou(&a, &b);
        assert!((v - 1.0 / 3.0).abs() < 1e-15, "{v}");
    }

    #[test]
    fn encode_identity_is_zero() {
        let b = Box2::new(10.0, 20.0, 30.0, 50.0);
        let t = encode_box(&b, &b).unwrap();
        assert_eq!(t, [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_hand_case() {
        // anchor 10x10 centered at (50,50), gt 20x20 centered at (55,50)
        let anchor = Box2::from_center(50.0, 50.0, 10.0, 10.0);
        let gt = Box2::from_center(55.0, 50.0, 20.0, 20.0);
        let t = encode_box(&gt, &anchor).unwrap();
        assert!((t[0] - 0.5).abs() < 1e-12);
        assert!(t[1].abs() < 1e-12);
        assert!((t[2] - 2f64.ln()).abs() < 1e-12);
        assert!((t[3] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn decode_zero_size_anchor_is_error() {
        let anchor = Box2::new(5.0, 5.0, 5.0, 9.0);
        assert!(decode_box(&anchor, &[0.0; 4]).is_err());
    }

    #[test]
    fn roundtrip_random_pairs() {
        // decode(anchor, encode(gt, anchor)) == gt within float round-off.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let gt = random_box(&mut rng);
            let anchor = random_box(&mut rng);
            let t = encode_box(&gt, &anchor).unwrap();
            let back = decode_box(&anchor, &t).unwrap();
            for (a, b) in [
                (back.x_min, gt.x_min),
                (back.y_min, gt.y_min),
                (back.x_max, gt.x_max),
                (back.y_max, gt.y_max),
            ] {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    fn random_box(rng: &mut impl rand::Rng) -> Box2 {
        let x = rng.random_range(0.0..80.0);
        let y = rng.random_range(0.0..80.0);
        let w = rng.random_range(0.5..40.0);
        let h = rng.random_range(0.5..40.0);
        Box2::new(x, y, x + w, y + h)
    }

    #[test]
    fn clip_keeps_positive_area() {
        let b = Box2::new(-10.0, -10.0, -5.0, -5.0);
        let c = b.clip(96.0, 96.0);
        assert!(c.is_valid());
        assert!(c.x_min >= 0.0 && c.y_min >= 0.0);
    }
}
