//! Proposal decoding, greedy NMS and top-K selection.

use crate::geometry::{decode_box, iou, Box2};

#[derive(Debug, Clone)]
pub struct Proposal {
    pub rect: Box2,
    pub score: f64,
    pub view: usize,
    pub anchor_index: usize,
}

/// Decodes every anchor with its predicted offsets and clips to the image.
pub fn decode_proposals(
    anchors: &[Box2],
    scores: &[f64],
    deltas: &[[f64; 4]],
    view: usize,
    image_size: f64,
) -> Vec<Proposal> {
    debug_assert_eq!(anchors.len(), scores.len());
    debug_assert_eq!(anchors.len(), deltas.len());
    anchors
        .iter()
        .enumerate()
        .map(|(j, anchor)| {
            let raw = decode_box(anchor, &deltas[j]).expect("anchors have positive size");
            Proposal {
                rect: raw.clip(image_size, image_size),
                score: scores[j],
                view,
                anchor_index: j,
            }
        })
        .collect()
}

fn rank_order(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.anchor_index.cmp(&b.anchor_index))
}

/// Greedy non-maximum suppression: proposals are taken in score order (ties
/// broken by anchor index) and each survivor suppresses later proposals that
/// overlap it by more than `threshold`. The result does not depend on the
/// input order.
pub fn nms(proposals: &[Proposal], threshold: f64) -> Vec<Proposal> {
    let mut sorted: Vec<&Proposal> = proposals.iter().collect();
    sorted.sort_by(|a, b| rank_order(a, b));
    let mut keep: Vec<Proposal> = Vec::new();
    for cand in sorted {
        if keep.iter().all(|k| iou(&k.rect, &cand.rect) <= threshold) {
            keep.push(cand.clone());
        }
    }
    keep
}

/// Highest-scoring `k` proposals after optional NMS, padded by repeating the
/// last survivor when fewer remain.
pub fn select_top_k(proposals: &[Proposal], k: usize, nms_threshold: Option<f64>) -> Vec<Proposal> {
    assert!(k >= 1, "top-k needs k >= 1");
    assert!(!proposals.is_empty(), "no proposals to select from");
    let mut survivors = match nms_threshold {
        Some(t) => nms(proposals, t),
        None => {
            let mut all = proposals.to_vec();
            all.sort_by(rank_order);
            all
        }
    };
    survivors.truncate(k);
    while survivors.len() < k {
        survivors.push(survivors.last().unwrap().clone());
    }
    survivors
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(rect: Box2, score: f64, idx: usize) -> Proposal {
        Proposal {
            rect,
            score,
            view: 0,
            anchor_index: idx,
        }
    }

    #[test]
    fn identical_boxes_suppress_lower_score() {
        let b = Box2::new(0.0, 0.0, 10.0, 10.0);
        let out = nms(&[p(b, 0.9, 0), p(b, 0.8, 1)], 0.7);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn top_one_is_best_post_nms() {
        let a = p(Box2::new(0.0, 0.0, 10.0, 10.0), 0.7, 0);
        let b = p(Box2::new(40.0, 40.0, 60.0, 60.0), 0.9, 1);
        let out = select_top_k(&[a, b], 1, Some(0.7));
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn padding_duplicates_last() {
        let a = p(Box2::new(0.0, 0.0, 10.0, 10.0), 0.7, 0);
        let out = select_top_k(&[a], 3, Some(0.5));
        assert_eq!(out.len(), 3);
        assert_eq!(out[1].anchor_index, 0);
        assert_eq!(out[2].anchor_index, 0);
    }

    #[test]
    fn selection_invariant_to_input_order() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let boxes = [
            p(Box2::new(0.0, 0.0, 12.0, 12.0), 0.95, 0),
            p(Box2::new(1.0, 1.0, 13.0, 13.0), 0.90, 1),
            p(Box2::new(30.0, 30.0, 45.0, 45.0), 0.85, 2),
            p(Box2::new(31.0, 30.0, 46.0, 45.0), 0.80, 3),
            p(Box2::new(70.0, 70.0, 80.0, 80.0), 0.10, 4),
        ];
        let baseline: Vec<usize> = select_top_k(&boxes, 3, Some(0.5))
            .iter()
            .map(|q| q.anchor_index)
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut shuffled = boxes.to_vec();
            shuffled.shuffle(&mut rng);
            let got: Vec<usize> = select_top_k(&shuffled, 3, Some(0.5))
                .iter()
                .map(|q| q.anchor_index)
                .collect();
            assert_eq!(got, baseline);
        }
    }

    /// Literal transcription of greedy NMS used as an oracle: all orderings
    /// of up to 5 boxes must agree with the implementation.
    fn nms_oracle(boxes: &[Proposal], threshold: f64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by(|&a, &b| {
            boxes[b]
                .score
                .partial_cmp(&boxes[a].score)
                .unwrap()
                .then(boxes[a].anchor_index.cmp(&boxes[b].anchor_index))
        });
        let mut kept: Vec<usize> = Vec::new();
        for &i in &order {
            let mut ok = true;
            for &j in &kept {
                if iou(&boxes[j].rect, &boxes[i].rect) > threshold {
                    ok = false;
                    break;
                }
            }
            if ok {
                kept.push(i);
            }
        }
        kept.iter().map(|&i| boxes[i].anchor_index).collect()
    }

    #[test]
    fn nms_matches_exhaustive_oracle_on_hand_boxes() {
        let boxes = [
            p(Box2::new(0.0, 0.0, 10.0, 10.0), 0.9, 0),
            p(Box2::new(2.0, 2.0, 12.0, 12.0), 0.85, 1),
            p(Box2::new(8.0, 8.0, 18.0, 18.0), 0.8, 2),
            p(Box2::new(20.0, 0.0, 30.0, 10.0), 0.7, 3),
            p(Box2::new(0.0, 20.0, 10.0, 30.0), 0.6, 4),
        ];
        for threshold in [0.1, 0.3, 0.5, 0.7] {
            let got: Vec<usize> = nms(&boxes, threshold).iter().map(|q| q.anchor_index).collect();
            assert_eq!(got, nms_oracle(&boxes, threshold), "threshold {threshold}");
        }
    }
}
