//! IoU-based positive/negative assignment and loss minibatch sampling.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{encode_box, iou, Box2};

/// Anchors (or proposals) below this IoU against every ground-truth box are
/// negatives; the band between here and the positive threshold is ignored.
pub const NEGATIVE_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone)]
pub struct Labeled {
    pub labels: Vec<Label>,
    /// Regression target toward the matched ground truth; zeros for
    /// non-positives.
    pub targets: Vec<[f64; 4]>,
    pub matched_gt: Vec<Option<usize>>,
}

/// Assigns a label per box: positive when IoU with some ground truth exceeds
/// `pos_threshold`, or when the box is the best match for a ground truth
/// (so every reachable ground truth keeps at least one positive); negative
/// below [`NEGATIVE_IOU`]; ignored in between. Empty ground truth makes
/// everything negative.
pub fn label_boxes(boxes: &[Box2], gts: &[Box2], pos_threshold: f64) -> Labeled {
    let n = boxes.len();
    let mut labels = vec![Label::Negative; n];
    let mut targets = vec![[0.0; 4]; n];
    let mut matched_gt = vec![None; n];
    if gts.is_empty() {
        return Labeled {
            labels,
            targets,
            matched_gt,
        };
    }

    let mut best_gt = vec![0usize; n];
    let mut best_iou = vec![0.0f64; n];
    let mut gt_best_anchor = vec![usize::MAX; gts.len()];
    let mut gt_best_iou = vec![0.0f64; gts.len()];
    for (i, b) in boxes.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(b, gt);
            if v > best_iou[i] {
                best_iou[i] = v;
                best_gt[i] = g;
            }
            if v > gt_best_iou[g] {
                gt_best_iou[g] = v;
                gt_best_anchor[g] = i;
            }
        }
    }

    for i in 0..n {
        labels[i] = if best_iou[i] > pos_threshold {
            Label::Positive
        } else if best_iou[i] < NEGATIVE_IOU {
            Label::Negative
        } else {
            Label::Ignore
        };
    }
    // Guarantee rule: the argmax box of each ground truth is positive. It
    // still regresses toward its own best-overlapping ground truth.
    for (g, &i) in gt_best_anchor.iter().enumerate() {
        if i != usize::MAX && gt_best_iou[g] > 0.0 {
            labels[i] = Label::Positive;
        }
    }
    for i in 0..n {
        if labels[i] == Label::Positive {
            let g = best_gt[i];
            matched_gt[i] = Some(g);
            targets[i] = encode_box(&gts[g], &boxes[i]).expect("anchors have positive size");
        }
    }
    Labeled {
        labels,
        targets,
        matched_gt,
    }
}

/// Samples a loss minibatch: up to `batch * pos_fraction` positives (chosen
/// at random when more are available), the rest negatives. Returns indices
/// into the labeled set, positives first.
pub fn sample_minibatch(
    labeled: &Labeled,
    batch: usize,
    pos_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, l) in labeled.labels.iter().enumerate() {
        match l {
            Label::Positive => pos.push(i),
            Label::Negative => neg.push(i),
            Label::Ignore => {}
        }
    }
    let max_pos = ((batch as f64 * pos_fraction).round() as usize).min(batch);
    if pos.len() > max_pos {
        pos.shuffle(rng);
        pos.truncate(max_pos);
        pos.sort_unstable();
    }
    let need_neg = (batch - pos.len()).min(neg.len());
    if neg.len() > need_neg {
        neg.shuffle(rng);
        neg.truncate(need_neg);
        neg.sort_unstable();
    }
    pos.extend(neg);
    pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn perfect_match_is_positive_with_zero_target() {
        let gt = Box2::new(10.0, 10.0, 30.0, 30.0);
        let anchors = vec![gt, Box2::new(60.0, 60.0, 70.0, 70.0)];
        let l = label_boxes(&anchors, &[gt], 0.7);
        assert_eq!(l.labels[0], Label::Positive);
        assert_eq!(l.targets[0], [0.0; 4]);
        assert_eq!(l.labels[1], Label::Negative);
    }

    #[test]
    fn argmax_rule_creates_one_positive_when_all_weak() {
        // all IoUs below the negative band except one at 0.2
        let gt = Box2::new(0.0, 0.0, 10.0, 10.0);
        let anchors = vec![
            Box2::new(4.0, 4.0, 14.0, 18.0), // IoU = 36/(100+140-36) ~ 0.18..0.2
            Box2::new(40.0, 40.0, 50.0, 50.0),
            Box2::new(70.0, 0.0, 80.0, 10.0),
        ];
        // oracle: exhaustive table
        let best = anchors
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                iou(a, &gt).partial_cmp(&iou(b, &gt)).unwrap()
            })
            .unwrap()
            .0;
        let l = label_boxes(&anchors, &[gt], 0.7);
        let positives: Vec<usize> = l
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == Label::Positive)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(positives, vec![best]);
    }

    #[test]
    fn no_ground_truth_means_all_negative() {
        let anchors = vec![Box2::new(0.0, 0.0, 5.0, 5.0); 4];
        let l = label_boxes(&anchors, &[], 0.7);
        assert!(l.labels.iter().all(|&x| x == Label::Negative));
    }

    #[test]
    fn reachable_gt_always_gets_a_positive() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let gts: Vec<Box2> = (0..3)
                .map(|_| {
                    let x = rng.random_range(0.0..60.0);
                    let y = rng.random_range(0.0..60.0);
                    Box2::new(x, y, x + rng.random_range(4.0..30.0), y + rng.random_range(4.0..30.0))
                })
                .collect();
            let anchors: Vec<Box2> = (0..40)
                .map(|_| {
                    let x = rng.random_range(0.0..80.0);
                    let y = rng.random_range(0.0..80.0);
                    Box2::new(x, y, x + rng.random_range(4.0..30.0), y + rng.random_range(4.0..30.0))
                })
                .collect();
            let l = label_boxes(&anchors, &gts, 0.7);
            for (g, gt) in gts.iter().enumerate() {
                // the argmax anchor of a reachable gt must be positive
                let best = anchors
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| iou(a, gt).partial_cmp(&iou(b, gt)).unwrap())
                    .unwrap();
                if iou(best.1, gt) > 0.0 {
                    assert_eq!(l.labels[best.0], Label::Positive, "gt {g} argmax not positive");
                }
            }
        }
    }

    #[test]
    fn minibatch_respects_positive_cap() {
        let gt = Box2::new(0.0, 0.0, 10.0, 10.0);
        let anchors = vec![gt; 30]; // 30 perfect positives
        let mut l = label_boxes(&anchors, &[gt], 0.7);
        // add negatives
        for _ in 0..100 {
            l.labels.push(Label::Negative);
            l.targets.push([0.0; 4]);
            l.matched_gt.push(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picked = sample_minibatch(&l, 64, 0.25, &mut rng);
        assert_eq!(picked.len(), 64);
        let pos = picked.iter().filter(|&&i| i < 30).count();
        assert_eq!(pos, 16);
    }
}
