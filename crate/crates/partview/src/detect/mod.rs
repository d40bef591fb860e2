//! The local part detection branch and the combined detection objective.
//!
//! The objective for one shape sums, over both the proposal module and the
//! local branch, a score term (binary cross-entropy averaged over the
//! sampled regions) and `lambda` times a location term (robust-L1 box
//! regression summed over the four coordinates and averaged over positives).

mod map;

pub use map::{average_precision, ScoredBox};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{decode_box, Box2};
use crate::model::ModelState;
use crate::region::{
    decode_proposals, label_boxes, nms, sample_minibatch, AnchorGrid, Label, Proposal,
};
use crate::shapegen::ViewSet;
use crate::tensor::{Tape, Tensor};

/// Proposals fed to the local branch per view during training, before
/// sampling. Ground-truth boxes are appended so early training always sees
/// positives.
const TRAIN_PROPOSALS_PER_VIEW: usize = 48;
/// Proposals scored by the local branch at inference time.
const INFER_PROPOSALS_PER_VIEW: usize = 96;

/// One emitted detection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub shape_id: String,
    pub view: usize,
    /// x_min, y_min, x_max, y_max (half-open pixels).
    pub rect: [f64; 4],
    pub score: f64,
}

impl Detection {
    pub fn rect(&self) -> Box2 {
        Box2::new(self.rect[0], self.rect[1], self.rect[2], self.rect[3])
    }
}

/// All ground-truth part boxes of one view, category-blind.
pub fn view_gt_boxes(vs: &ViewSet, view: usize) -> Vec<Box2> {
    vs.gsp[view].iter().map(|g| g.rect()).collect()
}

pub struct ShapeLoss {
    pub loss: Tensor,
    pub rpn_positives: usize,
    pub det_positives: usize,
}

/// Score + location loss for one branch: BCE averaged over sampled regions
/// plus `lambda` times smooth-L1 averaged over positives (zero without
/// positives).
fn branch_loss(
    tape: &Tape,
    logits: &Tensor,
    labels: Vec<f64>,
    pos_pred: Option<&Tensor>,
    pos_targets: Vec<[f64; 4]>,
    lambda: f64,
) -> Result<Tensor> {
    let labels_t = Tensor::new(vec![labels.len()], labels)?;
    let bce = tape.bce_with_logits(logits, &labels_t)?;
    let mut total = tape.reduce_mean(&bce, None)?;
    if let Some(pred) = pos_pred {
        if lambda != 0.0 && !pos_targets.is_empty() {
            let p = pos_targets.len();
            let targets = Tensor::new(vec![p, 4], pos_targets.into_iter().flatten().collect())?;
            let diff = tape.sub(pred, &targets)?;
            let sl1 = tape.smooth_l1(&diff)?;
            let reg = tape.reduce_sum(&sl1, None)?;
            let reg = tape.scale(&reg, lambda / p as f64)?;
            total = tape.add(&total, &reg)?;
        }
    }
    Ok(total)
}

/// Per-view forward state the loss assembly shares between branches.
pub struct ViewForward {
    pub featmap: Tensor,
    pub score_logits: Tensor,
    pub deltas: Tensor,
    pub proposals: Vec<Proposal>,
}

/// Runs the backbone and the proposal heads for every view and decodes
/// (detached) proposals for downstream selection. With `frozen_rpn` the
/// proposal heads run off-tape on a detached feature map, so neither they
/// nor the backbone receive gradients through the scores.
pub fn forward_views(
    tape: &Tape,
    model: &ModelState,
    anchors: &AnchorGrid,
    vs: &ViewSet,
    proposal_nms: Option<f64>,
    keep: usize,
    frozen_rpn: bool,
) -> Result<Vec<ViewForward>> {
    let cfg = &model.cfg;
    let mut out = Vec::with_capacity(vs.views.len());
    for (v, raster) in vs.views.iter().enumerate() {
        let view_t = ModelState::raster_tensor(raster);
        let featmap = model.backbone_forward(tape, &view_t)?;
        let head_input = if frozen_rpn {
            featmap.detached()
        } else {
            featmap.clone()
        };
        let (score_logits, deltas) = model.rpn_forward(tape, &head_input)?;

        let score_values: Vec<f64> = score_logits
            .to_vec()
            .iter()
            .map(|&z| 1.0 / (1.0 + (-z).exp()))
            .collect();
        let delta_values: Vec<[f64; 4]> = deltas
            .to_vec()
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        let decoded = decode_proposals(
            &anchors.boxes,
            &score_values,
            &delta_values,
            v,
            cfg.image_size as f64,
        );
        let mut survivors = match proposal_nms {
            Some(t) => nms(&decoded, t),
            None => {
                let mut all = decoded;
                all.sort_by(|a, b| {
                    b.score
                        .partial_cmp(&a.score)
                        .unwrap()
                        .then(a.anchor_index.cmp(&b.anchor_index))
                });
                all
            }
        };
        survivors.truncate(keep);
        out.push(ViewForward {
            featmap,
            score_logits,
            deltas,
            proposals: survivors,
        });
    }
    Ok(out)
}

/// The detection objective for one shape (all views), with anchor and
/// proposal minibatches drawn from `rng`. When the local branch is disabled
/// the objective reduces to the proposal terms.
pub fn detection_loss(
    tape: &Tape,
    model: &ModelState,
    anchors: &AnchorGrid,
    vs: &ViewSet,
    rng: &mut ChaCha8Rng,
) -> Result<ShapeLoss> {
    let cfg = &model.cfg;
    let views = forward_views(
        tape,
        model,
        anchors,
        vs,
        cfg.nms_threshold,
        TRAIN_PROPOSALS_PER_VIEW,
        false,
    )?;

    // Proposal-module terms, sampled per view, pooled over the shape.
    let mut rpn_logit_parts: Vec<Tensor> = Vec::new();
    let mut rpn_labels: Vec<f64> = Vec::new();
    let mut rpn_pos_parts: Vec<Tensor> = Vec::new();
    let mut rpn_pos_targets: Vec<[f64; 4]> = Vec::new();
    for (v, fwd) in views.iter().enumerate() {
        let gts = view_gt_boxes(vs, v);
        let labeled = label_boxes(&anchors.boxes, &gts, cfg.s_r);
        let picked = sample_minibatch(&labeled, cfg.rpn_batch, cfg.rpn_pos_fraction, rng);
        if picked.is_empty() {
            continue;
        }
        let logits = tape.gather(&fwd.score_logits, &picked)?;
        rpn_logit_parts.push(tape.reshape(&logits, vec![picked.len(), 1])?);
        let mut pos_rows = Vec::new();
        for &i in &picked {
            let positive = labeled.labels[i] == Label::Positive;
            rpn_labels.push(if positive { 1.0 } else { 0.0 });
            if positive {
                pos_rows.push(i);
                rpn_pos_targets.push(labeled.targets[i]);
            }
        }
        if !pos_rows.is_empty() {
            rpn_pos_parts.push(tape.gather_rows(&fwd.deltas, &pos_rows)?);
        }
    }
    let rpn_logits = {
        let refs: Vec<&Tensor> = rpn_logit_parts.iter().collect();
        let cat = tape.concat(&refs)?;
        let n = rpn_labels.len();
        tape.reshape(&cat, vec![n])?
    };
    let rpn_pos = if rpn_pos_parts.is_empty() {
        None
    } else {
        let refs: Vec<&Tensor> = rpn_pos_parts.iter().collect();
        Some(tape.concat(&refs)?)
    };
    let rpn_positives = rpn_pos_targets.len();
    let mut loss = branch_loss(
        tape,
        &rpn_logits,
        rpn_labels,
        rpn_pos.as_ref(),
        rpn_pos_targets,
        cfg.lambda,
    )?;

    // Local branch terms, sampled across the whole shape.
    let mut det_positives = 0usize;
    if cfg.use_local_branch {
        // Candidate proposals per view, with ground truth appended.
        let mut cand: Vec<(usize, Box2)> = Vec::new();
        for (v, fwd) in views.iter().enumerate() {
            for p in &fwd.proposals {
                cand.push((v, p.rect));
            }
            for gt in view_gt_boxes(vs, v) {
                cand.push((v, gt));
            }
        }
        // Label within each view against that view's ground truth.
        let mut labels_all: Vec<Label> = Vec::with_capacity(cand.len());
        let mut targets_all: Vec<[f64; 4]> = Vec::with_capacity(cand.len());
        for v in 0..views.len() {
            let boxes: Vec<Box2> = cand
                .iter()
                .filter(|(cv, _)| *cv == v)
                .map(|(_, b)| *b)
                .collect();
            let gts = view_gt_boxes(vs, v);
            let labeled = label_boxes(&boxes, &gts, cfg.s_l);
            labels_all.extend(labeled.labels);
            targets_all.extend(labeled.targets);
        }
        // cand is view-ordered, so labels/targets line up after the
        // per-view re-labeling above.
        let mut cand_sorted: Vec<(usize, Box2)> = Vec::with_capacity(cand.len());
        for v in 0..views.len() {
            cand_sorted.extend(cand.iter().filter(|(cv, _)| *cv == v).cloned());
        }
        let labeled = crate::region::Labeled {
            labels: labels_all,
            targets: targets_all,
            matched_gt: vec![None; cand_sorted.len()],
        };
        let picked = sample_minibatch(&labeled, cfg.det_batch, cfg.det_pos_fraction, rng);
        if !picked.is_empty() {
            // RoI features per view in picked order.
            let mut row_parts: Vec<Tensor> = Vec::new();
            let mut labels: Vec<f64> = Vec::new();
            let mut pos_rows: Vec<usize> = Vec::new();
            let mut pos_targets: Vec<[f64; 4]> = Vec::new();
            let mut row = 0usize;
            for v in 0..views.len() {
                let view_boxes: Vec<Box2> = picked
                    .iter()
                    .filter(|&&i| cand_sorted[i].0 == v)
                    .map(|&i| cand_sorted[i].1)
                    .collect();
                if view_boxes.is_empty() {
                    continue;
                }
                row_parts.push(model.roi_features(tape, &views[v].featmap, &view_boxes)?);
                for &i in picked.iter().filter(|&&i| cand_sorted[i].0 == v) {
                    let positive = labeled.labels[i] == Label::Positive;
                    labels.push(if positive { 1.0 } else { 0.0 });
                    if positive {
                        pos_rows.push(row);
                        pos_targets.push(labeled.targets[i]);
                    }
                    row += 1;
                }
            }
            let refs: Vec<&Tensor> = row_parts.iter().collect();
            let roi = tape.concat(&refs)?;
            let (logits, deltas) = model.detection_forward(tape, &roi)?;
            det_positives = pos_targets.len();
            let pos_pred = if pos_rows.is_empty() {
                None
            } else {
                Some(tape.gather_rows(&deltas, &pos_rows)?)
            };
            let local = branch_loss(tape, &logits, labels, pos_pred.as_ref(), pos_targets, cfg.lambda)?;
            loss = tape.add(&loss, &local)?;
        }
    }

    Ok(ShapeLoss {
        loss,
        rpn_positives,
        det_positives,
    })
}

/// Full detection inference for one shape. With the local branch enabled,
/// proposals are re-scored and refined by the head; otherwise the proposal
/// scores and boxes are emitted directly.
pub fn run_detection(model: &ModelState, vs: &ViewSet, score_threshold: f64) -> Result<Vec<Detection>> {
    let cfg = &model.cfg;
    let grid = cfg.feature_grid();
    let anchors = crate::region::generate_anchors(grid, grid, cfg);
    let tape = Tape::new();
    let views = forward_views(
        &tape,
        model,
        &anchors,
        vs,
        cfg.nms_threshold,
        INFER_PROPOSALS_PER_VIEW,
        true,
    )?;

    let mut detections = Vec::new();
    for (v, fwd) in views.iter().enumerate() {
        if fwd.proposals.is_empty() {
            continue;
        }
        let scored: Vec<Proposal> = if cfg.use_local_branch {
            let boxes: Vec<Box2> = fwd.proposals.iter().map(|p| p.rect).collect();
            let roi = model.roi_features(&tape, &fwd.featmap, &boxes)?;
            let (logits, deltas) = model.detection_forward(&tape, &roi)?;
            let scores: Vec<f64> = logits
                .to_vec()
                .iter()
                .map(|&z| 1.0 / (1.0 + (-z).exp()))
                .collect();
            let dv = deltas.to_vec();
            fwd.proposals
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let t = [dv[i * 4], dv[i * 4 + 1], dv[i * 4 + 2], dv[i * 4 + 3]];
                    let refined = decode_box(&p.rect, &t)
                        .expect("proposals are clipped to positive size")
                        .clip(cfg.image_size as f64, cfg.image_size as f64);
                    Proposal {
                        rect: refined,
                        score: scores[i],
                        view: v,
                        anchor_index: i,
                    }
                })
                .collect()
        } else {
            fwd.proposals.clone()
        };
        let kept: Vec<Proposal> = scored
            .into_iter()
            .filter(|p| p.score >= score_threshold)
            .collect();
        for p in nms(&kept, cfg.detect_nms) {
            detections.push(Detection {
                shape_id: vs.shape_id.clone(),
                view: p.view,
                rect: [p.rect.x_min, p.rect.y_min, p.rect.x_max, p.rect.y_max],
                score: p.score,
            });
        }
    }
    Ok(detections)
}

/// Detection mAP at the given IoU threshold over a set of shapes
/// (single part class, groups = shape x view).
pub fn evaluate_map(
    per_shape: &[(Vec<Detection>, &ViewSet)],
    iou_thr: f64,
    views: usize,
) -> f64 {
    let mut gts: Vec<Vec<Box2>> = Vec::new();
    let mut scored = Vec::new();
    for (si, (detections, vs)) in per_shape.iter().enumerate() {
        for v in 0..views {
            gts.push(view_gt_boxes(vs, v));
        }
        for d in detections {
            scored.push(ScoredBox {
                group: si * views + d.view,
                rect: d.rect(),
                score: d.score,
            });
        }
    }
    average_precision(&scored, &gts, iou_thr)
}

/// Serializes detections as the JSON interchange array.
pub fn write_detections(path: &std::path::Path, detections: &[Detection]) -> Result<()> {
    let json = serde_json::to_vec_pretty(detections)
        .map_err(|e| crate::error::Error::json(path, e))?;
    std::fs::write(path, json).map_err(|e| crate::error::Error::io(path, e))
}
