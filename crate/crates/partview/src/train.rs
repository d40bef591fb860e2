//! Optimization: SGD with momentum over the combined objective
//! `O = (1/|Phi|) sum O_det + (eta/|Psi|) sum O_cls`, trained on the
//! detection benchmark and the classification benchmark in alternating
//! blocks (or jointly per step when both point at the same data).
//!
//! Detection steps update the backbone, the proposal heads and the local
//! branch; classification steps update the backbone and the global branch
//! while the proposal heads and the local branch stay frozen.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agg::classification_loss;
use crate::config::Config;
use crate::detect::{detection_loss, evaluate_map, run_detection};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::region::{generate_anchors, AnchorGrid};
use crate::shapegen::{Dataset, ViewSet};
use crate::tensor::{Tape, Tensor};

/// Plain SGD with momentum and decoupled-from-nothing weight decay:
/// `v = mu v + g + wd w; w -= lr v`. Velocity is kept per parameter name so
/// frozen phases leave both weights and state untouched.
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: std::collections::BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: std::collections::BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &[(&str, &Tensor)]) {
        for (name, tensor) in params {
            let Some(grad) = tensor.grad() else { continue };
            let vel = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; tensor.numel()]);
            let (mu, wd, lr) = (self.momentum, self.weight_decay, self.learning_rate);
            tensor.apply_update(|i, w| {
                vel[i] = mu * vel[i] + grad[i] + wd * *w;
                *w -= lr * vel[i];
            });
        }
    }
}

/// Parameters updated under the detection benchmark.
fn phi_param_names(model: &ModelState) -> Vec<String> {
    model
        .params()
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| {
            n.starts_with("backbone.")
                || n.starts_with("rpn.")
                || (model.cfg.use_local_branch && n.starts_with("det."))
        })
        .collect()
}

/// Parameters updated under the classification benchmark (everything in the
/// shared trunk except the proposal heads, plus the global branch).
fn psi_param_names(model: &ModelState) -> Vec<String> {
    model
        .params()
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| {
            n.starts_with("backbone.")
                || n.starts_with("proj.")
                || n.starts_with("agg.")
                || n.starts_with("cls.")
                || n.starts_with("vlad.")
        })
        .collect()
}

pub struct TrainOutcome {
    pub model: ModelState,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_phi_loss: Option<f64>,
    pub final_psi_loss: Option<f64>,
}

pub struct Trainer {
    pub cfg: Config,
    pub model: ModelState,
    anchors: AnchorGrid,
    pub opt: Sgd,
    rng: ChaCha8Rng,
    phi_names: Vec<String>,
    psi_names: Vec<String>,
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Trainer> {
        let model = ModelState::new(cfg)?;
        Ok(Trainer::with_model(model))
    }

    pub fn with_model(model: ModelState) -> Trainer {
        let cfg = model.cfg.clone();
        let grid = cfg.feature_grid();
        let anchors = generate_anchors(grid, grid, &cfg);
        let opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x5851_F42D_4C95_7F2D));
        let phi_names = phi_param_names(&model);
        let psi_names = psi_param_names(&model);
        Trainer {
            cfg,
            model,
            anchors,
            opt,
            rng,
            phi_names,
            psi_names,
        }
    }

    pub fn anchors(&self) -> &AnchorGrid {
        &self.anchors
    }

    /// One detection step: forward, backward, SGD on the detection set.
    pub fn step_phi(&mut self, shape: &ViewSet) -> Result<f64> {
        if shape.gsp.iter().all(|v| v.is_empty()) && shape.gsp.is_empty() {
            return Err(Error::invalid("step_phi", "shape carries no part annotations"));
        }
        let tape = Tape::new();
        let out = detection_loss(&tape, &self.model, &self.anchors, shape, &mut self.rng)?;
        let value = out.loss.item();
        tape.backward(&out.loss)?;
        let names = self.phi_names.clone();
        self.apply(&names);
        self.model.zero_grads();
        Ok(value)
    }

    /// One classification step: the loss is scaled by `eta` so the combined
    /// objective weighting carries into the gradients.
    pub fn step_psi(&mut self, shape: &ViewSet) -> Result<f64> {
        if shape.class_id >= self.cfg.classes {
            return Err(Error::invalid(
                "step_psi",
                format!("class id {} out of range", shape.class_id),
            ));
        }
        let tape = Tape::new();
        let (loss, _) = classification_loss(&tape, &self.model, &self.anchors, shape)?;
        let loss = tape.scale(&loss, self.cfg.eta)?;
        let value = loss.item();
        tape.backward(&loss)?;
        let names = self.psi_names.clone();
        self.apply(&names);
        self.model.zero_grads();
        Ok(value)
    }

    /// Joint step for the shared-benchmark case: one pass over the shape
    /// computes both objectives and every parameter set updates at once.
    pub fn step_joint(&mut self, shape: &ViewSet) -> Result<f64> {
        let tape = Tape::new();
        let det = detection_loss(&tape, &self.model, &self.anchors, shape, &mut self.rng)?;
        let (cls, _) = classification_loss(&tape, &self.model, &self.anchors, shape)?;
        let cls = tape.scale(&cls, self.cfg.eta)?;
        let total = tape.add(&det.loss, &cls)?;
        let value = total.item();
        tape.backward(&total)?;
        let mut names = self.phi_names.clone();
        names.extend(self.psi_names.iter().cloned());
        names.sort();
        names.dedup();
        self.apply(&names);
        self.model.zero_grads();
        Ok(value)
    }

    fn apply(&mut self, names: &[String]) {
        let params: Vec<(&str, &Tensor)> = names
            .iter()
            .map(|n| (n.as_str(), self.model.param(n)))
            .collect();
        self.opt.step(&params);
    }
}

fn load_split(ds: &Dataset, split: &str) -> Result<Vec<ViewSet>> {
    let mut out = Vec::new();
    for entry in ds.manifest.split_ids(split) {
        out.push(ds.load_shape(&entry.id)?);
    }
    Ok(out)
}

/// Combined objective value on fixed batches without touching parameters:
/// `(phi_term, psi_term, total)` with `total = phi_term + eta * psi_term`.
/// Region sampling is seeded per shape id so duplicated samples contribute
/// identical values.
pub fn evaluate_objective(
    model: &ModelState,
    anchors: &AnchorGrid,
    phi_batch: &[&ViewSet],
    psi_batch: &[&ViewSet],
    eta: f64,
) -> Result<(f64, f64, f64)> {
    let mut phi_term = 0.0;
    for vs in phi_batch {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&vs.shape_id));
        let out = detection_loss(&tape, model, anchors, vs, &mut rng)?;
        phi_term += out.loss.item();
    }
    if !phi_batch.is_empty() {
        phi_term /= phi_batch.len() as f64;
    }
    let mut psi_term = 0.0;
    for vs in psi_batch {
        let tape = Tape::new();
        let (loss, _) = classification_loss(&tape, model, anchors, vs)?;
        psi_term += loss.item();
    }
    if !psi_batch.is_empty() {
        psi_term /= psi_batch.len() as f64;
    }
    Ok((phi_term, psi_term, phi_term + eta * psi_term))
}

fn stable_hash(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Accuracy of the model on a slice of labeled shapes.
pub fn quick_accuracy(model: &ModelState, anchors: &AnchorGrid, shapes: &[ViewSet]) -> Result<f64> {
    if shapes.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for vs in shapes {
        let tape = Tape::new();
        let (out, _) = crate::agg::classification_forward(&tape, model, anchors, vs)?;
        let probs = out.probs.to_vec();
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == vs.class_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / shapes.len() as f64)
}

/// Detection mAP@0.5 of the model on a slice of annotated shapes. The
/// emission threshold stays low so average precision sweeps the scores.
pub const EVAL_SCORE_FLOOR: f64 = 0.05;

pub fn quick_map(model: &ModelState, shapes: &[ViewSet]) -> Result<f64> {
    let mut per_shape = Vec::new();
    for vs in shapes {
        let det = run_detection(model, vs, EVAL_SCORE_FLOOR)?;
        per_shape.push((det, vs));
    }
    Ok(evaluate_map(&per_shape, 0.5, model.cfg.views))
}

/// Full training: loads both benchmarks, runs the alternating (or joint)
/// schedule, writes `train.csv` and per-epoch checkpoints under `out_dir`,
/// and keeps the last good checkpoint if the loss turns NaN.
pub fn train(cfg: &Config, out_dir: &Path) -> Result<TrainOutcome> {
    let phi_dir = cfg
        .phi
        .clone()
        .ok_or_else(|| Error::invalid("train", "config is missing the phi dataset path"))?;
    let psi_dir = cfg
        .psi
        .clone()
        .ok_or_else(|| Error::invalid("train", "config is missing the psi dataset path"))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let phi_ds = Dataset::open(&phi_dir)?;
    let psi_ds = Dataset::open(&psi_dir)?;
    let phi_train = load_split(&phi_ds, "train")?;
    let psi_train = load_split(&psi_ds, "train")?;
    if phi_train.is_empty() || psi_train.is_empty() {
        return Err(Error::invalid("train", "empty training split"));
    }
    if phi_train.iter().any(|vs| vs.gsp.iter().all(|v| v.is_empty())) {
        // tolerated: individual views may be empty, but a fully unannotated
        // detection shape is a data error
        if phi_train.iter().any(|vs| vs.gsp.is_empty()) {
            return Err(Error::invalid("train", "phi shape without gsp annotations"));
        }
    }
    let phi_hold = load_split(&phi_ds, "test")?;
    let psi_hold = load_split(&psi_ds, "test")?;
    let hold_n = 8usize;

    let mut trainer = match &cfg.init_ckpt {
        Some(path) => Trainer::with_model(ModelState::load_partial(cfg, path)?),
        None => Trainer::new(cfg)?,
    };
    // Identical paths train jointly per step; a zero eta removes the
    // classification objective entirely, so those runs fall back to the
    // alternating loop with an empty psi budget.
    let combined = phi_dir == psi_dir && cfg.eta > 0.0 && cfg.psi_epochs() > 0;

    let log_path = out_dir.join("train.csv");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );
    writeln!(log, "step,benchmark,loss,held_out_map,held_out_acc,wall_s")
        .map_err(|e| Error::io(&log_path, e))?;

    let ckpt_path = out_dir.join("model.ckpt");
    let started = Instant::now();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37));
    let mut step = 0usize;
    let mut held_map = f64::NAN;
    let mut held_acc = f64::NAN;
    let mut last_phi = None;
    let mut last_psi = None;

    let write_row = |log: &mut std::io::BufWriter<std::fs::File>,
                         step: usize,
                         bench: &str,
                         loss: f64,
                         held_map: f64,
                         held_acc: f64|
     -> Result<()> {
        writeln!(
            log,
            "{step},{bench},{loss:.6},{},{},{:.3}",
            if held_map.is_nan() { String::new() } else { format!("{held_map:.4}") },
            if held_acc.is_nan() { String::new() } else { format!("{held_acc:.4}") },
            started.elapsed().as_secs_f64()
        )
        .map_err(|e| Error::io(&log_path, e))
    };

    let abort = |step: usize| Error::NanLoss { step };

    if combined {
        let epochs = cfg.epochs.max(cfg.phi_epochs().max(cfg.psi_epochs()));
        let decay_point = (epochs * phi_train.len()) as f64 * cfg.lr_decay_at;
        for _epoch in 0..epochs {
            let mut order: Vec<usize> = (0..phi_train.len()).collect();
            order.shuffle(&mut order_rng);
            for &i in &order {
                trainer.opt.learning_rate = if (step as f64) >= decay_point {
                    cfg.learning_rate * cfg.lr_decay
                } else {
                    cfg.learning_rate
                };
                let loss = trainer.step_joint(&phi_train[i])?;
                if !loss.is_finite() {
                    return Err(abort(step));
                }
                last_phi = Some(loss);
                last_psi = Some(loss);
                write_row(&mut log, step, "phi+psi", loss, held_map, held_acc)?;
                step += 1;
            }
            trainer.model.save(&ckpt_path)?;
        }
    } else {
        let mut phi_queue: Vec<usize> = Vec::new();
        let mut psi_queue: Vec<usize> = Vec::new();
        let mut phi_left = cfg.phi_epochs() * phi_train.len();
        let mut psi_left = if cfg.eta == 0.0 {
            0
        } else {
            cfg.psi_epochs() * psi_train.len()
        };
        let period = cfg.alternation_period.max(1);
        let mut psi_done_since_ckpt = 0usize;
        let decay_point = (phi_left + psi_left) as f64 * cfg.lr_decay_at;
        // one decay step partway through: early steps shape the detector,
        // the lower tail keeps the attention/classifier coupling stable
        macro_rules! set_lr {
            ($trainer:expr, $step:expr) => {
                $trainer.opt.learning_rate = if ($step as f64) >= decay_point {
                    cfg.learning_rate * cfg.lr_decay
                } else {
                    cfg.learning_rate
                };
            };
        }

        while phi_left > 0 || psi_left > 0 {
            for _ in 0..period.min(phi_left) {
                if phi_queue.is_empty() {
                    phi_queue = (0..phi_train.len()).collect();
                    phi_queue.shuffle(&mut order_rng);
                }
                let i = phi_queue.pop().unwrap();
                set_lr!(trainer, step);
                let loss = trainer.step_phi(&phi_train[i])?;
                if !loss.is_finite() {
                    return Err(abort(step));
                }
                last_phi = Some(loss);
                write_row(&mut log, step, "phi", loss, held_map, held_acc)?;
                step += 1;
            }
            phi_left -= period.min(phi_left);

            for _ in 0..period.min(psi_left) {
                if psi_queue.is_empty() {
                    psi_queue = (0..psi_train.len()).collect();
                    psi_queue.shuffle(&mut order_rng);
                }
                let i = psi_queue.pop().unwrap();
                set_lr!(trainer, step);
                let loss = trainer.step_psi(&psi_train[i])?;
                if !loss.is_finite() {
                    return Err(abort(step));
                }
                last_psi = Some(loss);
                write_row(&mut log, step, "psi", loss, held_map, held_acc)?;
                step += 1;
                psi_done_since_ckpt += 1;
            }
            psi_left -= period.min(psi_left);

            if psi_done_since_ckpt >= psi_train.len() || (phi_left == 0 && psi_left == 0) {
                psi_done_since_ckpt = 0;
                held_map = quick_map(&trainer.model, &phi_hold[..hold_n.min(phi_hold.len())])?;
                held_acc = quick_accuracy(
                    &trainer.model,
                    trainer.anchors(),
                    &psi_hold[..hold_n.min(psi_hold.len())],
                )?;
                trainer.model.save(&ckpt_path)?;
            }
        }
    }

    trainer.model.save(&ckpt_path)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        model: trainer.model,
        checkpoint: ckpt_path,
        log: log_path,
        final_phi_loss: last_phi,
        final_psi_loss: last_psi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapegen::{generate_scene, part_boxes_from_masks, render_views, OmissionRule};

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.image_size = 64;
        cfg.backbone_channels = vec![4, 8];
        cfg.feature_dim = 16;
        cfg.patterns = 4;
        cfg.det_hidden = 32;
        cfg.anchor_scales = vec![2.0, 6.0, 16.0];
        cfg.rpn_batch = 16;
        cfg.det_batch = 16;
        cfg.views = 2;
        cfg.regions_per_view = 4;
        cfg.classes = 2;
        cfg
    }

    fn labeled_shape(cfg: &Config, template: &str, class_id: usize, seed: u64) -> ViewSet {
        let scene = generate_scene(template, seed).unwrap();
        let mut vs = render_views(
            &scene,
            &format!("{template}_{seed}"),
            cfg.views,
            cfg.image_size,
            cfg.image_size,
        )
        .unwrap();
        vs.class_id = class_id;
        vs.gsp = part_boxes_from_masks(&vs.masks, &OmissionRule::default());
        vs
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_identical() {
        let mut cfg = small_cfg();
        cfg.learning_rate = 0.0;
        let mut trainer = Trainer::new(&cfg).unwrap();
        let shape = labeled_shape(&cfg, "chair", 0, 1);
        let before: Vec<Vec<u64>> = trainer
            .model
            .params()
            .iter()
            .map(|p| p.tensor.to_vec().iter().map(|v| v.to_bits()).collect())
            .collect();
        trainer.step_phi(&shape).unwrap();
        trainer.step_psi(&shape).unwrap();
        for (p, old) in trainer.model.params().iter().zip(&before) {
            let now: Vec<u64> = p.tensor.to_vec().iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, old, "{} drifted", p.name);
        }
    }

    #[test]
    fn step_psi_freezes_rpn_and_local_branch() {
        let cfg = small_cfg();
        let mut trainer = Trainer::new(&cfg).unwrap();
        let shape = labeled_shape(&cfg, "chair", 0, 2);
        let frozen: Vec<(String, Vec<u64>)> = trainer
            .model
            .params()
            .iter()
            .filter(|p| p.name.starts_with("rpn.") || p.name.starts_with("det."))
            .map(|p| {
                (
                    p.name.clone(),
                    p.tensor.to_vec().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect();
        trainer.step_psi(&shape).unwrap();
        for (name, old) in frozen {
            let now: Vec<u64> = trainer
                .model
                .param(&name)
                .to_vec()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(now, old, "{name} changed during a classification step");
        }
        // but the backbone did move
        let moved = trainer
            .model
            .params()
            .iter()
            .filter(|p| p.name.starts_with("backbone."))
            .any(|p| p.tensor.grad().is_none()); // grads were consumed+zeroed
        assert!(moved);
    }

    #[test]
    fn step_phi_freezes_global_branch() {
        let cfg = small_cfg();
        let mut trainer = Trainer::new(&cfg).unwrap();
        let shape = labeled_shape(&cfg, "chair", 0, 3);
        let frozen: Vec<(String, Vec<u64>)> = trainer
            .model
            .params()
            .iter()
            .filter(|p| {
                p.name.starts_with("agg.") || p.name.starts_with("cls.") || p.name.starts_with("proj.")
            })
            .map(|p| {
                (
                    p.name.clone(),
                    p.tensor.to_vec().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect();
        trainer.step_phi(&shape).unwrap();
        for (name, old) in frozen {
            let now: Vec<u64> = trainer
                .model
                .param(&name)
                .to_vec()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(now, old, "{name} changed during a detection step");
        }
    }

    #[test]
    fn objective_is_linear_in_eta() {
        let cfg = small_cfg();
        let model = ModelState::new(&cfg).unwrap();
        let grid = cfg.feature_grid();
        let anchors = generate_anchors(grid, grid, &cfg);
        let a = labeled_shape(&cfg, "chair", 0, 4);
        let b = labeled_shape(&cfg, "plane", 1, 5);
        let phi_batch = vec![&a];
        let psi_batch = vec![&b];
        let (p0, _c0, t0) = evaluate_objective(&model, &anchors, &phi_batch, &psi_batch, 0.0).unwrap();
        let (p1, c1, t1) = evaluate_objective(&model, &anchors, &phi_batch, &psi_batch, 1.0).unwrap();
        let (p2, c2, t2) = evaluate_objective(&model, &anchors, &phi_batch, &psi_batch, 2.0).unwrap();
        assert_eq!(p0, p1);
        assert_eq!(c1, c2);
        assert!((t0 - p0).abs() < 1e-15);
        assert!((t1 - (p1 + c1)).abs() < 1e-12);
        assert!((t2 - (p2 + 2.0 * c2)).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_leaves_normalized_loss_unchanged() {
        let cfg = small_cfg();
        let model = ModelState::new(&cfg).unwrap();
        let grid = cfg.feature_grid();
        let anchors = generate_anchors(grid, grid, &cfg);
        let a = labeled_shape(&cfg, "chair", 0, 6);
        let b = labeled_shape(&cfg, "plane", 1, 7);
        let single = evaluate_objective(&model, &anchors, &[&a, &b], &[&a, &b], 1.0).unwrap();
        let doubled =
            evaluate_objective(&model, &anchors, &[&a, &b, &a, &b], &[&a, &b, &a, &b], 1.0)
                .unwrap();
        assert!((single.2 - doubled.2).abs() < 1e-12);
    }

    #[test]
    fn overfit_two_shapes_drives_detection_loss_down() {
        let mut cfg = small_cfg();
        cfg.learning_rate = 0.005;
        let mut trainer = Trainer::new(&cfg).unwrap();
        let shapes = vec![
            labeled_shape(&cfg, "chair", 0, 8),
            labeled_shape(&cfg, "plane", 1, 9),
        ];
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for it in 0..220 {
            let loss = trainer.step_phi(&shapes[it % 2]).unwrap();
            if it == 0 {
                first = loss;
            }
            last = loss;
        }
        assert!(
            last < first * 0.5,
            "detection loss did not fall: {first} -> {last}"
        );
    }
}
