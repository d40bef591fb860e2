//! Single-class average precision for detections.

use crate::geometry::{iou, Box2};

/// A scored detection assigned to an evaluation group (one group per view of
/// each shape; matching never crosses groups).
#[derive(Debug, Clone)]
pub struct ScoredBox {
    pub group: usize,
    pub rect: Box2,
    pub score: f64,
}

/// PASCAL-style all-points average precision: detections are swept in score
/// order, greedily matched one-to-one against ground truth at `iou_thr`,
/// and the precision envelope is integrated over recall.
pub fn average_precision(detections: &[ScoredBox], gts: &[Vec<Box2>], iou_thr: f64) -> f64 {
    let total_gt: usize = gts.iter().map(|g| g.len()).sum();
    if total_gt == 0 || detections.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tps = Vec::with_capacity(order.len());
    for &di in &order {
        let det = &detections[di];
        let mut best = (0usize, 0.0f64);
        for (gi, gt) in gts[det.group].iter().enumerate() {
            if matched[det.group][gi] {
                continue;
            }
            let v = iou(&det.rect, gt);
            if v > best.1 {
                best = (gi, v);
            }
        }
        if best.1 >= iou_thr && best.1 > 0.0 {
            matched[det.group][best.0] = true;
            tps.push(true);
        } else {
            tps.push(false);
        }
    }

    let mut tp = 0usize;
    let mut points = Vec::with_capacity(tps.len());
    for (i, &hit) in tps.iter().enumerate() {
        if hit {
            tp += 1;
        }
        let recall = tp as f64 / total_gt as f64;
        let precision = tp as f64 / (i + 1) as f64;
        points.push((recall, precision));
    }

    // precision envelope, integrated over recall increments
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let env = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_recall) * env;
            prev_recall = r;
        }
    }
    ap
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(at: f64) -> Box2 {
        Box2::new(at, 0.0, at + 10.0, 10.0)
    }

    #[test]
    fn perfect_detections_give_ap_one() {
        let gts = vec![vec![unit_box(0.0), unit_box(20.0)], vec![unit_box(5.0)]];
        let detections = vec![
            ScoredBox { group: 0, rect: unit_box(0.0), score: 0.3 },
            ScoredBox { group: 0, rect: unit_box(20.0), score: 0.9 },
            ScoredBox { group: 1, rect: unit_box(5.0), score: 0.5 },
        ];
        assert_eq!(average_precision(&detections, &gts, 0.5), 1.0);
    }

    #[test]
    fn no_detections_give_zero() {
        let gts = vec![vec![unit_box(0.0)]];
        assert_eq!(average_precision(&[], &gts, 0.5), 0.0);
    }

    /// Independent threshold-sweep oracle: for every cutoff size, rematch
    /// from scratch and integrate the precision envelope over recall.
    fn ap_sweep_oracle(detections: &[ScoredBox], gts: &[Vec<Box2>], iou_thr: f64) -> f64 {
        let total_gt: usize = gts.iter().map(|g| g.len()).sum();
        if total_gt == 0 || detections.is_empty() {
            return 0.0;
        }
        let mut order: Vec<usize> = (0..detections.len()).collect();
        order.sort_by(|&a, &b| {
            detections[b]
                .score
                .partial_cmp(&detections[a].score)
                .unwrap()
        });
        let mut points: Vec<(f64, f64)> = Vec::new();
        for n in 1..=order.len() {
            let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut tp = 0usize;
            for &di in order.iter().take(n) {
                let det = &detections[di];
                let mut best = (0usize, 0.0f64);
                for (gi, gt) in gts[det.group].iter().enumerate() {
                    if !matched[det.group][gi] {
                        let v = iou(&det.rect, gt);
                        if v > best.1 {
                            best = (gi, v);
                        }
                    }
                }
                if best.1 >= iou_thr && best.1 > 0.0 {
                    matched[det.group][best.0] = true;
                    tp += 1;
                }
            }
            points.push((tp as f64 / total_gt as f64, tp as f64 / n as f64));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for i in 0..points.len() {
            if points[i].0 > prev {
                let mut env: f64 = 0.0;
                for &(r, p) in &points {
                    if r >= points[i].0 {
                        env = env.max(p);
                    }
                }
                ap += (points[i].0 - prev) * env;
                prev = points[i].0;
            }
        }
        ap
    }

    #[test]
    fn hand_case_hit_miss_hit_matches_oracle() {
        let gts = vec![vec![unit_box(0.0), unit_box(30.0)]];
        let detections = vec![
            ScoredBox { group: 0, rect: unit_box(0.0), score: 0.9 },  // hit
            ScoredBox { group: 0, rect: unit_box(60.0), score: 0.8 }, // miss
            ScoredBox { group: 0, rect: unit_box(30.0), score: 0.7 }, // hit
        ];
        let got = average_precision(&detections, &gts, 0.5);
        let want = ap_sweep_oracle(&detections, &gts, 0.5);
        assert!((got - want).abs() < 1e-12);
        // by hand: points (0.5, 1), (0.5, 0.5), (1.0, 2/3); envelope at r=0.5
        // is 1, at 1.0 is 2/3 -> 0.5*1 + 0.5*2/3
        assert!((got - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn all_hit_miss_patterns_match_sweep_oracle() {
        // exhaustive over detection sets of up to 8 items
        for n in 1..=8usize {
            for pattern in 0..(1u32 << n) {
                let hits = pattern.count_ones() as usize;
                for extra_gt in 0..2usize {
                    let total_gt = (hits + extra_gt).max(1);
                    let mut gts = vec![Vec::new()];
                    let mut detections = Vec::new();
                    let mut slot = 0.0;
                    for i in 0..n {
                        if pattern & (1 << i) != 0 {
                            gts[0].push(unit_box(slot));
                            detections.push(ScoredBox {
                                group: 0,
                                rect: unit_box(slot),
                                score: 1.0 - i as f64 * 0.01,
                            });
                        } else {
                            detections.push(ScoredBox {
                                group: 0,
                                rect: unit_box(slot + 500.0),
                                score: 1.0 - i as f64 * 0.01,
                            });
                        }
                        slot += 20.0;
                    }
                    while gts[0].len() < total_gt {
                        gts[0].push(unit_box(slot + 1000.0));
                        slot += 20.0;
                    }
                    let got = average_precision(&detections, &gts, 0.5);
                    let want = ap_sweep_oracle(&detections, &gts, 0.5);
                    assert!(
                        (got - want).abs() < 1e-12,
                        "n={n} pattern={pattern:b} got {got} want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn ap_nonincreasing_in_iou_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let gts = vec![(0..4)
                .map(|i| {
                    let x = i as f64 * 25.0;
                    Box2::new(x, 0.0, x + rng.random_range(8.0..12.0), rng.random_range(8.0..12.0))
                })
                .collect::<Vec<_>>()];
            let detections: Vec<ScoredBox> = (0..6)
                .map(|i| {
                    let x = (i % 4) as f64 * 25.0 + rng.random_range(-3.0..3.0);
                    ScoredBox {
                        group: 0,
                        rect: Box2::new(x, 0.0, x + 10.0, 10.0),
                        score: rng.random_range(0.0..1.0),
                    }
                })
                .collect();
            let mut prev = f64::INFINITY;
            for thr in [0.3, 0.5, 0.7, 0.9] {
                let ap = average_precision(&detections, &gts, thr);
                assert!(ap <= prev + 1e-12);
                prev = ap;
            }
        }
    }

    #[test]
    fn rank_preserving_rescore_leaves_ap_unchanged() {
        let gts = vec![vec![unit_box(0.0), unit_box(30.0)]];
        let detections = vec![
            ScoredBox { group: 0, rect: unit_box(0.0), score: 0.9 },
            ScoredBox { group: 0, rect: unit_box(60.0), score: 0.5 },
            ScoredBox { group: 0, rect: unit_box(30.0), score: 0.2 },
        ];
        let base = average_precision(&detections, &gts, 0.5);
        let rescored: Vec<ScoredBox> = detections
            .iter()
            .map(|d| ScoredBox {
                score: 0.1 + 0.5 * d.score.powi(3), // positive monotone map
                ..d.clone()
            })
            .collect();
        assert_eq!(base, average_precision(&rescored, &gts, 0.5));
    }
}
