//! Anchor grids.
//!
//! Anchors tile every feature cell with one box per (scale, ratio) pair,
//! centered on the cell center in image coordinates. The enumeration order
//! is fixed: cell row-major, then scale, then ratio; everything downstream
//! (head channel layout, labeling, proposal indices) relies on it. Anchors
//! may extend beyond the image; they are clipped only when decoded.

use crate::config::Config;
use crate::geometry::Box2;

#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub boxes: Vec<Box2>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub per_cell: usize,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Builds the anchor set for a `grid_h x grid_w` feature map.
/// Anchor sides are `image_size / 32 * scale`, so the default scales
/// [1,2,4,8,16,32] span from a few pixels up to the whole view.
pub fn generate_anchors(grid_h: usize, grid_w: usize, cfg: &Config) -> AnchorGrid {
    let stride = cfg.stride() as f64;
    let unit = cfg.image_size as f64 / 32.0;
    let mut boxes = Vec::with_capacity(grid_h * grid_w * cfg.anchors_per_cell());
    for row in 0..grid_h {
        for col in 0..grid_w {
            let cx = (col as f64 + 0.5) * stride;
            let cy = (row as f64 + 0.5) * stride;
            for &scale in &cfg.anchor_scales {
                let side = unit * scale;
                for &ratio in &cfg.anchor_ratios {
                    // ratio is height:width; areas stay equal across ratios.
                    let w = side / ratio.sqrt();
                    let h = side * ratio.sqrt();
                    boxes.push(Box2::from_center(cx, cy, w, h));
                }
            }
        }
    }
    AnchorGrid {
        boxes,
        grid_h,
        grid_w,
        per_cell: cfg.anchors_per_cell(),
    }
}
