//! Ground-truth part boxes from label masks.
//!
//! Per view and per part category, each 4-connected component of the
//! category's pixels gets the tight bounding box of its pixels. Small boxes
//! are then omitted: any box measuring less than 0.45 of the largest box of
//! the same category is dropped. The comparison measure (area or longest
//! side) and the scope of the maximum (per view or across the whole shape)
//! are configurable; the defaults compare areas across all views of a shape.

use super::dataset::GspBox;
use super::render::Raster;
use crate::geometry::Box2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmissionMeasure {
    Area,
    Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmissionScope {
    PerShape,
    PerView,
}

#[derive(Debug, Clone, Copy)]
pub struct OmissionRule {
    pub threshold: f64,
    pub measure: OmissionMeasure,
    pub scope: OmissionScope,
}

impl Default for OmissionRule {
    fn default() -> Self {
        OmissionRule {
            threshold: 0.45,
            measure: OmissionMeasure::Area,
            scope: OmissionScope::PerShape,
        }
    }
}

impl OmissionRule {
    fn measure_of(&self, b: &Box2) -> f64 {
        match self.measure {
            OmissionMeasure::Area => b.area(),
            OmissionMeasure::Side => b.width().max(b.height()),
        }
    }
}

/// Tight boxes of the 4-connected components of every part category, one
/// list per view, after applying the omission rule. Empty categories yield
/// no boxes; applying the rule twice is a no-op.
pub fn part_boxes_from_masks(masks: &[Raster], rule: &OmissionRule) -> Vec<Vec<GspBox>> {
    let mut per_view: Vec<Vec<GspBox>> = masks.iter().map(component_boxes).collect();

    // Largest measure per category, per the configured scope.
    let max_for = |boxes: &[&GspBox]| -> std::collections::BTreeMap<u8, f64> {
        let mut m = std::collections::BTreeMap::new();
        for b in boxes {
            let v = rule.measure_of(&b.rect());
            let e = m.entry(b.part_category).or_insert(v);
            if v > *e {
                *e = v;
            }
        }
        m
    };

    match rule.scope {
        OmissionScope::PerShape => {
            let all: Vec<&GspBox> = per_view.iter().flatten().collect();
            let maxes = max_for(&all);
            for boxes in &mut per_view {
                boxes.retain(|b| rule.measure_of(&b.rect()) >= rule.threshold * maxes[&b.part_category]);
            }
        }
        OmissionScope::PerView => {
            for boxes in &mut per_view {
                let refs: Vec<&GspBox> = boxes.iter().collect();
                let maxes = max_for(&refs);
                boxes.retain(|b| rule.measure_of(&b.rect()) >= rule.threshold * maxes[&b.part_category]);
            }
        }
    }
    per_view
}

/// One tight box per 4-connected component per category, no filtering.
fn component_boxes(mask: &Raster) -> Vec<GspBox> {
    let (w, h) = (mask.width, mask.height);
    let mut visited = vec![false; w * h];
    let mut boxes = Vec::new();
    let mut queue = std::collections::VecDeque::new();

    for start in 0..w * h {
        let cat = mask.data[start];
        if cat == 0 || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let (mut x_min, mut y_min) = (start % w, start / w);
        let (mut x_max, mut y_max) = (x_min, y_min);
        while let Some(idx) = queue.pop_front() {
            let (x, y) = (idx % w, idx / w);
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
            let mut push = |nx: usize, ny: usize| {
                let nidx = ny * w + nx;
                if !visited[nidx] && mask.data[nidx] == cat {
                    visited[nidx] = true;
                    queue.push_back(nidx);
                }
            };
            if x > 0 {
                push(x - 1, y);
            }
            if x + 1 < w {
                push(x + 1, y);
            }
            if y > 0 {
                push(x, y - 1);
            }
            if y + 1 < h {
                push(x, y + 1);
            }
        }
        boxes.push(GspBox {
            part_category: cat,
            rect: [
                x_min as f64,
                y_min as f64,
                (x_max + 1) as f64,
                (y_max + 1) as f64,
            ],
        });
    }
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(w: usize, h: usize, pixels: &[(usize, usize, u8)]) -> Raster {
        let mut r = Raster::new(w, h);
        for &(x, y, c) in pixels {
            r.data[y * w + x] = c;
        }
        r
    }

    #[test]
    fn single_pixel_box_is_tight() {
        let mask = mask_from(16, 16, &[(5, 9, 3)]);
        let boxes = part_boxes_from_masks(std::slice::from_ref(&mask), &OmissionRule::default());
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].len(), 1);
        assert_eq!(boxes[0][0].rect, [5.0, 9.0, 6.0, 10.0]);
        assert_eq!(boxes[0][0].part_category, 3);
    }

    #[test]
    fn small_component_dropped_by_area_rule() {
        // 10x10 and 4x4 components of the same category: 16 < 0.45 * 100.
        let mut pixels = Vec::new();
        for y in 0..10 {
            for x in 0..10 {
                pixels.push((x, y, 2u8));
            }
        }
        for y in 20..24 {
            for x in 20..24 {
                pixels.push((x, y, 2u8));
            }
        }
        let mask = mask_from(32, 32, &pixels);
        let boxes = part_boxes_from_masks(std::slice::from_ref(&mask), &OmissionRule::default());
        assert_eq!(boxes[0].len(), 1);
        assert_eq!(boxes[0][0].rect, [0.0, 0.0, 10.0, 10.0]);
    }

    #[test]
    fn omission_uses_cross_view_maximum() {
        // The small component survives alone in its view only under PerView
        // scope; under PerShape it is compared against the other view.
        let big: Vec<(usize, usize, u8)> = (0..10)
            .flat_map(|y| (0..10).map(move |x| (x, y, 5u8)))
            .collect();
        let small: Vec<(usize, usize, u8)> = (0..4)
            .flat_map(|y| (0..4).map(move |x| (x, y, 5u8)))
            .collect();
        let masks = vec![mask_from(32, 32, &big), mask_from(32, 32, &small)];

        let per_shape = part_boxes_from_masks(&masks, &OmissionRule::default());
        assert_eq!(per_shape[0].len(), 1);
        assert!(per_shape[1].is_empty(), "16 < 0.45 * 100 across views");

        let per_view = part_boxes_from_masks(
            &masks,
            &OmissionRule {
                scope: OmissionScope::PerView,
                ..OmissionRule::default()
            },
        );
        assert_eq!(per_view[1].len(), 1, "alone in its view it is the maximum");
    }

    #[test]
    fn separate_categories_not_compared() {
        let mut pixels = Vec::new();
        for y in 0..10 {
            for x in 0..10 {
                pixels.push((x, y, 1u8));
            }
        }
        pixels.push((20, 20, 2u8));
        let mask = mask_from(32, 32, &pixels);
        let boxes = part_boxes_from_masks(std::slice::from_ref(&mask), &OmissionRule::default());
        assert_eq!(boxes[0].len(), 2);
    }

    #[test]
    fn filter_is_idempotent_and_components_partition() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (w, h) = (rng.random_range(8..64), rng.random_range(8..64));
            let mut mask = Raster::new(w, h);
            for v in mask.data.iter_mut() {
                *v = if rng.random_bool(0.3) {
                    rng.random_range(1..4)
                } else {
                    0
                };
            }
            let rule = OmissionRule::default();
            let once = part_boxes_from_masks(std::slice::from_ref(&mask), &rule);

            // Components partition the nonzero pixels: oracle count by
            // exhaustive pixel scan of each box against its category.
            let unfiltered = component_boxes(&mask);
            let covered: usize = unfiltered
                .iter()
                .map(|b| {
                    let mut n = 0;
                    for y in b.rect[1] as usize..b.rect[3] as usize {
                        for x in b.rect[0] as usize..b.rect[2] as usize {
                            if mask.at(x, y) == b.part_category {
                                n += 1;
                            }
                        }
                    }
                    n
                })
                .sum();
            let nonzero = mask.data.iter().filter(|&&v| v != 0).count();
            assert!(covered >= nonzero, "boxes must cover all labeled pixels");

            // Idempotence: surviving boxes all satisfy the ratio, so a
            // second pass keeps them.
            for views in [&once] {
                for b in views.iter().flatten() {
                    let max = views
                        .iter()
                        .flatten()
                        .filter(|o| o.part_category == b.part_category)
                        .map(|o| o.rect().area())
                        .fold(0.0, f64::max);
                    assert!(b.rect().area() >= rule.threshold * max - 1e-9);
                }
            }
        }
    }
}
