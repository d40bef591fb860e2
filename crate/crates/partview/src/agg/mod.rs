//! The global feature branch: region features are aggregated against learned
//! part patterns with two attention factors, then classified.
//!
//! With `R = V*K` projected region features `f_r` (rows of an `R x D` matrix)
//! and `N` patterns `theta_n`:
//!
//! * `alpha` is an `R x N` row-stochastic matrix; row r is a softmax over the
//!   patterns of `key_n . f_r + key_bias_n`.
//! * `phi_n = sum_r alpha(r, n) * (theta_n - f_r)`, an `N x D` matrix.
//! * `beta` (an `N`-simplex vector) scores each `phi_n` against the classes:
//!   `beta = softmax((W1 [phi] + W2 [U]) w + g)` where `U` holds the
//!   classifier weights, giving a second gradient path into them.
//! * The global feature is `f = sum_n beta(n) phi_n`, classified by a
//!   softmax layer over `U f + bias`.

pub mod baselines;

use crate::error::Result;
use crate::model::ModelState;
use crate::tensor::{Tape, Tensor};

/// Row-stochastic attention of each region over the patterns.
pub fn part_attention(
    tape: &Tape,
    region_feats: &Tensor,
    keys: &Tensor,
    key_bias: &Tensor,
) -> Result<Tensor> {
    let keys_t = tape.transpose(keys)?; // D x N
    let logits = tape.matmul(region_feats, &keys_t)?; // R x N
    let logits = tape.add_row_bias(&logits, key_bias)?;
    tape.softmax(&logits, 1)
}

/// Pattern-specific aggregations `phi_n = sum_r alpha(r,n) (theta_n - f_r)`.
/// Algebraically `phi = diag(colsum(alpha)) theta - alpha^T F`.
pub fn pattern_aggregate(
    tape: &Tape,
    alpha: &Tensor,
    region_feats: &Tensor,
    theta: &Tensor,
) -> Result<Tensor> {
    let col_sums = tape.reduce_sum(alpha, Some(0))?; // N
    let weighted_theta = tape.scale_rows(theta, &col_sums)?; // N x D
    let alpha_t = tape.transpose(alpha)?; // N x R
    let mixed = tape.matmul(&alpha_t, region_feats)?; // N x D
    tape.sub(&weighted_theta, &mixed)
}

/// Pattern-level attention over the aggregations, tied to the classifier
/// weights.
pub fn pattern_attention(
    tape: &Tape,
    phi: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
    cls_weight: &Tensor,
    map: &Tensor,
    map_bias: &Tensor,
) -> Result<Tensor> {
    let from_phi = tape.matmul(w1, phi)?; // N x D
    let from_cls = tape.matmul(w2, cls_weight)?; // N x D
    let mixed = tape.add(&from_phi, &from_cls)?;
    let scores = tape.matmul(&mixed, map)?; // N x 1
    let n = phi.shape()[0];
    let scores = tape.reshape(&scores, vec![n])?;
    let scores = tape.add(&scores, map_bias)?;
    tape.softmax(&scores, 0)
}

/// `f = sum_n beta(n) phi_n`.
pub fn global_feature(tape: &Tape, phi: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let n = phi.shape()[0];
    let d = phi.shape()[1];
    let beta_row = tape.reshape(beta, vec![1, n])?;
    let f = tape.matmul(&beta_row, phi)?; // 1 x D
    tape.reshape(&f, vec![d])
}

/// Class logits and probabilities for a global feature.
pub fn classify(
    tape: &Tape,
    feature: &Tensor,
    cls_weight: &Tensor,
    cls_bias: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = feature.numel();
    let col = tape.reshape(feature, vec![d, 1])?;
    let logits = tape.matmul(cls_weight, &col)?; // C x 1
    let c = cls_weight.shape()[0];
    let logits = tape.reshape(&logits, vec![c])?;
    let logits = tape.add(&logits, cls_bias)?;
    let probs = tape.softmax(&logits, 0)?;
    Ok((logits, probs))
}

/// Cross entropy between the predicted distribution (from logits) and a
/// target distribution.
pub fn cross_entropy(tape: &Tape, logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let logp = tape.log_softmax(logits, 0)?;
    let weighted = tape.mul(target, &logp)?;
    let s = tape.reduce_sum(&weighted, None)?;
    tape.scale(&s, -1.0)
}

/// Everything the global branch produces for one shape.
pub struct GlobalOutputs {
    pub alpha: Option<Tensor>,
    pub phi: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub feature: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

/// Full global branch on projected region features (`R x D`), honoring the
/// configured aggregation mode.
pub fn global_forward(
    tape: &Tape,
    model: &ModelState,
    region_feats: &Tensor,
) -> Result<GlobalOutputs> {
    let (feature, attn) = baselines::aggregate(tape, model, model.cfg.aggregation, region_feats)?;
    let (logits, probs) = classify(
        tape,
        &feature,
        model.param("cls.weight"),
        model.param("cls.bias"),
    )?;
    let (alpha, phi, beta) = match attn {
        Some(a) => (a.alpha, a.phi, a.beta),
        None => (None, None, None),
    };
    Ok(GlobalOutputs {
        alpha,
        phi,
        beta,
        feature,
        logits,
        probs,
    })
}

pub fn one_hot(class: usize, classes: usize) -> Tensor {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    Tensor::new(vec![classes], v).expect("one hot")
}

/// The classification pipeline for one shape: regions come from the frozen
/// proposal heads (top K per view), get RoI-pooled on the live feature maps,
/// projected, aggregated and classified. Returns the global outputs and the
/// selected region boxes per view.
pub fn classification_forward(
    tape: &Tape,
    model: &ModelState,
    anchors: &crate::region::AnchorGrid,
    vs: &crate::shapegen::ViewSet,
) -> Result<(GlobalOutputs, Vec<Vec<crate::geometry::Box2>>)> {
    let cfg = &model.cfg;
    let k = cfg.regions_per_view;
    let views = crate::detect::forward_views(
        tape,
        model,
        anchors,
        vs,
        cfg.nms_threshold,
        k.max(16),
        true,
    )?;
    let mut parts: Vec<Tensor> = Vec::with_capacity(views.len());
    let mut boxes_per_view = Vec::with_capacity(views.len());
    for fwd in &views {
        let top = crate::region::select_top_k(&fwd.proposals, k, None);
        let boxes: Vec<crate::geometry::Box2> = top.iter().map(|p| p.rect).collect();
        parts.push(model.roi_features(tape, &fwd.featmap, &boxes)?);
        boxes_per_view.push(boxes);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let roi = tape.concat(&refs)?; // (V*K) x D_roi
    let projected = model.project_regions(tape, &roi)?; // (V*K) x D
    let outputs = global_forward(tape, model, &projected)?;
    Ok((outputs, boxes_per_view))
}

/// Attention snapshot for one shape, for offline inspection of what the
/// aggregation attends to.
#[derive(serde::Serialize)]
pub struct AttentionDump {
    pub shape_id: String,
    /// (V*K) x N row-stochastic matrix (ones when the factor is fixed).
    pub alpha: Vec<Vec<f64>>,
    /// N-vector on the simplex (ones when the factor is fixed).
    pub beta: Vec<f64>,
    /// Selected region boxes per view, corner convention.
    pub topk_boxes: Vec<Vec<[f64; 4]>>,
}

pub fn attention_dump(
    model: &ModelState,
    anchors: &crate::region::AnchorGrid,
    vs: &crate::shapegen::ViewSet,
) -> Result<AttentionDump> {
    let tape = Tape::new();
    let (out, boxes) = classification_forward(&tape, model, anchors, vs)?;
    let n = model.cfg.patterns;
    let rk = model.cfg.views * model.cfg.regions_per_view;
    let Some(alpha_t) = out.alpha else {
        return Err(crate::error::Error::invalid(
            "inspect",
            format!("aggregation mode {} has no attention", model.cfg.aggregation),
        ));
    };
    let alpha_v = alpha_t.to_vec();
    let alpha: Vec<Vec<f64>> = (0..rk).map(|r| alpha_v[r * n..(r + 1) * n].to_vec()).collect();
    let beta = match out.beta {
        Some(b) => b.to_vec(),
        None => vec![1.0; n],
    };
    Ok(AttentionDump {
        shape_id: vs.shape_id.clone(),
        alpha,
        beta,
        topk_boxes: boxes
            .iter()
            .map(|view| {
                view.iter()
                    .map(|b| [b.x_min, b.y_min, b.x_max, b.y_max])
                    .collect()
            })
            .collect(),
    })
}

/// Cross-entropy classification loss for one labeled shape.
pub fn classification_loss(
    tape: &Tape,
    model: &ModelState,
    anchors: &crate::region::AnchorGrid,
    vs: &crate::shapegen::ViewSet,
) -> Result<(Tensor, GlobalOutputs)> {
    let (outputs, _) = classification_forward(tape, model, anchors, vs)?;
    let target = one_hot(vs.class_id, model.cfg.classes);
    let loss = cross_entropy(tape, &outputs.logits, &target)?;
    Ok((loss, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn zero_parameters_give_uniform_alpha() {
        let tape = Tape::new();
        let feats = t(vec![3, 4], (0..12).map(|i| i as f64 * 0.37).collect());
        let keys = Tensor::zeros(vec![5, 4]);
        let bias = Tensor::zeros(vec![5]);
        let alpha = part_attention(&tape, &feats, &keys, &bias).unwrap();
        for v in alpha.to_vec() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_pattern_alpha_is_all_ones() {
        let tape = Tape::new();
        let feats = t(vec![4, 3], (0..12).map(f64::from).collect());
        let keys = t(vec![1, 3], vec![0.3, -0.2, 0.9]);
        let bias = t(vec![1], vec![0.5]);
        let alpha = part_attention(&tape, &feats, &keys, &bias).unwrap();
        assert!(alpha.to_vec().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn alpha_matches_direct_exp_normalize_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let (r, n, d) = (3, 2, 4);
        let feats: Vec<f64> = (0..r * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let keys: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let bias: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let alpha = part_attention(
            &tape,
            &t(vec![r, d], feats.clone()),
            &t(vec![n, d], keys.clone()),
            &t(vec![n], bias.clone()),
        )
        .unwrap()
        .to_vec();
        for ri in 0..r {
            let mut es = vec![0.0; n];
            for ni in 0..n {
                let dot: f64 = (0..d).map(|k| keys[ni * d + k] * feats[ri * d + k]).sum();
                es[ni] = (dot + bias[ni]).exp();
            }
            let z: f64 = es.iter().sum();
            for ni in 0..n {
                assert!((alpha[ri * n + ni] - es[ni] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phi_vanishes_when_features_equal_theta() {
        let tape = Tape::new();
        let theta = t(vec![1, 3], vec![0.5, -1.0, 2.0]);
        let feats = t(vec![4, 3], vec![0.5, -1.0, 2.0].repeat(4));
        let alpha = Tensor::full(vec![4, 1], 0.25);
        let phi = pattern_aggregate(&tape, &alpha, &feats, &theta).unwrap();
        for v in phi.to_vec() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_alpha_two_regions_gives_theta_minus_mean() {
        let tape = Tape::new();
        let theta = t(vec![1, 2], vec![1.0, 2.0]);
        let feats = t(vec![2, 2], vec![0.0, 4.0, 2.0, 0.0]);
        let alpha = Tensor::full(vec![2, 1], 0.5);
        let phi = pattern_aggregate(&tape, &alpha, &feats, &theta).unwrap();
        // theta - mean(f) = (1,2) - (1,2) = 0
        assert_eq!(phi.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn ones_alpha_matches_closed_form() {
        let tape = Tape::new();
        let (r, n, d) = (5, 3, 2);
        let theta = t(vec![n, d], (0..n * d).map(|i| i as f64 * 0.3 - 1.0).collect());
        let feats = t(vec![r, d], (0..r * d).map(|i| (i as f64).sin()).collect());
        let alpha = Tensor::full(vec![r, n], 1.0);
        let phi = pattern_aggregate(&tape, &alpha, &feats, &theta).unwrap().to_vec();
        let fv = feats.to_vec();
        let tv = theta.to_vec();
        for ni in 0..n {
            for di in 0..d {
                let sum_f: f64 = (0..r).map(|ri| fv[ri * d + di]).sum();
                let want = r as f64 * tv[ni * d + di] - sum_f;
                assert!((phi[ni * d + di] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_mixes_give_uniform_beta() {
        let tape = Tape::new();
        let (n, c, d) = (4, 3, 5);
        let phi = t(vec![n, d], (0..n * d).map(|i| i as f64 * 0.1).collect());
        let beta = pattern_attention(
            &tape,
            &phi,
            &Tensor::zeros(vec![n, n]),
            &Tensor::zeros(vec![n, c]),
            &t(vec![c, d], vec![0.3; c * d]),
            &Tensor::zeros(vec![d, 1]),
            &Tensor::zeros(vec![n]),
        )
        .unwrap();
        for v in beta.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn large_bias_saturates_beta_to_one_hot() {
        let tape = Tape::new();
        let (n, c, d) = (3, 2, 4);
        let phi = Tensor::zeros(vec![n, d]);
        let mut bias = vec![0.0; n];
        bias[0] = 50.0;
        let beta = pattern_attention(
            &tape,
            &phi,
            &Tensor::zeros(vec![n, n]),
            &Tensor::zeros(vec![n, c]),
            &Tensor::zeros(vec![c, d]),
            &Tensor::zeros(vec![d, 1]),
            &t(vec![n], bias),
        )
        .unwrap()
        .to_vec();
        assert!((beta[0] - 1.0).abs() < 1e-12);
        assert!(beta[1] < 1e-12 && beta[2] < 1e-12);
    }

    #[test]
    fn beta_matches_matrix_arithmetic_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (n, c, d) = (3, 2, 4);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(-1.5..1.5)).collect()
        };
        let (phi_v, w1_v, w2_v, u_v, w_v, g_v) = (
            draw(n * d),
            draw(n * n),
            draw(n * c),
            draw(c * d),
            draw(d),
            draw(n),
        );
        let tape = Tape::new();
        let beta = pattern_attention(
            &tape,
            &t(vec![n, d], phi_v.clone()),
            &t(vec![n, n], w1_v.clone()),
            &t(vec![n, c], w2_v.clone()),
            &t(vec![c, d], u_v.clone()),
            &t(vec![d, 1], w_v.clone()),
            &t(vec![n], g_v.clone()),
        )
        .unwrap()
        .to_vec();

        // independent oracle with plain loops
        let mut logits = vec![0.0; n];
        for i in 0..n {
            for k in 0..d {
                let mut m = 0.0;
                for j in 0..n {
                    m += w1_v[i * n + j] * phi_v[j * d + k];
                }
                for j in 0..c {
                    m += w2_v[i * c + j] * u_v[j * d + k];
                }
                logits[i] += m * w_v[k];
            }
            logits[i] += g_v[i];
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for i in 0..n {
            let want = (logits[i] - mx).exp() / z;
            assert!((beta[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_beta_selects_phi_row() {
        let tape = Tape::new();
        let phi = t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let beta = t(vec![3], vec![0.0, 1.0, 0.0]);
        let f = global_feature(&tape, &phi, &beta).unwrap();
        assert_eq!(f.to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn zero_classifier_gives_uniform_probs_and_ln_c_loss() {
        let tape = Tape::new();
        let f = t(vec![3], vec![0.7, -0.3, 1.1]);
        let (logits, probs) = classify(
            &tape,
            &f,
            &Tensor::zeros(vec![4, 3]),
            &Tensor::zeros(vec![4]),
        )
        .unwrap();
        for p in probs.to_vec() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let loss = cross_entropy(&tape, &logits, &one_hot(2, 4)).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_closed_form_point_nine() {
        // p(correct) = 0.9 -> loss = -ln 0.9
        let tape = Tape::new();
        let p = [0.9f64, 0.06, 0.04];
        let logits = t(vec![3], p.iter().map(|x| x.ln()).collect());
        let loss = cross_entropy(&tape, &logits, &one_hot(0, 3)).unwrap();
        assert!((loss.item() - (-0.9f64.ln())).abs() < 1e-12);
    }
}
