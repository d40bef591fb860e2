//! Aggregation modes for the ablation table: pooling baselines, a NetVLAD
//! head, and the attention variants with one or both factors forced to ones.

use super::{global_feature, part_attention, pattern_aggregate, pattern_attention};
use crate::config::AggMode;
use crate::error::Result;
use crate::model::ModelState;
use crate::tensor::{Tape, Tensor};

pub struct AttentionTensors {
    pub alpha: Option<Tensor>,
    pub phi: Option<Tensor>,
    pub beta: Option<Tensor>,
}

/// Aggregates `R x D` region features into a single `D` feature.
pub fn aggregate(
    tape: &Tape,
    model: &ModelState,
    mode: AggMode,
    region_feats: &Tensor,
) -> Result<(Tensor, Option<AttentionTensors>)> {
    let n = model.cfg.patterns;
    let r = region_feats.shape()[0];
    match mode {
        AggMode::MaxPool => Ok((tape.reduce_max(region_feats, Some(0))?, None)),
        AggMode::MeanPool => Ok((tape.reduce_mean(region_feats, Some(0))?, None)),
        AggMode::NetVlad => {
            let scores = tape.matmul(region_feats, model.param("vlad.assign"))?;
            let scores = tape.add_row_bias(&scores, model.param("vlad.assign_bias"))?;
            let assign = tape.softmax(&scores, 1)?; // R x N
            // vlad_n = sum_r a(r,n) (f_r - c_n)
            let col_sums = tape.reduce_sum(&assign, Some(0))?;
            let weighted_c = tape.scale_rows(model.param("vlad.centroids"), &col_sums)?;
            let assign_t = tape.transpose(&assign)?;
            let mixed = tape.matmul(&assign_t, region_feats)?; // N x D
            let vlad = tape.sub(&mixed, &weighted_c)?;
            let vlad = tape.l2_normalize_rows(&vlad)?; // intra-normalization
            let d = model.cfg.feature_dim;
            let flat = tape.reshape(&vlad, vec![1, n * d])?;
            let flat = tape.l2_normalize_rows(&flat)?;
            let out = tape.matmul(&flat, model.param("vlad.proj"))?;
            let out = tape.add_row_bias(&out, model.param("vlad.proj_bias"))?;
            Ok((tape.reshape(&out, vec![d])?, None))
        }
        AggMode::NoAtt | AggMode::PtAtt | AggMode::PnAtt | AggMode::MultiAtt => {
            let learned_alpha = matches!(mode, AggMode::PtAtt | AggMode::MultiAtt);
            let learned_beta = matches!(mode, AggMode::PnAtt | AggMode::MultiAtt);
            let alpha = if learned_alpha {
                part_attention(
                    tape,
                    region_feats,
                    model.param("agg.key"),
                    model.param("agg.key_bias"),
                )?
            } else {
                // fixed factor: literally ones, not 1/N
                Tensor::full(vec![r, n], 1.0)
            };
            let phi = pattern_aggregate(tape, &alpha, region_feats, model.param("agg.theta"))?;
            let (feature, beta) = if learned_beta {
                let beta = pattern_attention(
                    tape,
                    &phi,
                    model.param("agg.w1"),
                    model.param("agg.w2"),
                    model.param("cls.weight"),
                    model.param("agg.map"),
                    model.param("agg.map_bias"),
                )?;
                (global_feature(tape, &phi, &beta)?, Some(beta))
            } else {
                // beta of ones: plain sum over patterns
                (tape.reduce_sum(&phi, Some(0))?, None)
            };
            Ok((
                feature,
                Some(AttentionTensors {
                    alpha: Some(alpha),
                    phi: Some(phi),
                    beta,
                }),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn model_with(mode: AggMode) -> ModelState {
        let mut cfg = Config::default();
        cfg.image_size = 32;
        cfg.backbone_channels = vec![4, 8];
        cfg.feature_dim = 6;
        cfg.patterns = 3;
        cfg.classes = 2;
        cfg.det_hidden = 16;
        cfg.aggregation = mode;
        ModelState::new(&cfg).unwrap()
    }

    fn feats(r: usize, d: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![r, d], (0..r * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn maxpool_of_single_region_is_identity() {
        let model = model_with(AggMode::MaxPool);
        let tape = Tape::new();
        let f = feats(1, 6, 0);
        let (out, _) = aggregate(&tape, &model, AggMode::MaxPool, &f).unwrap();
        assert_eq!(out.to_vec(), f.to_vec());
    }

    #[test]
    fn noatt_equals_closed_form() {
        let model = model_with(AggMode::NoAtt);
        let tape = Tape::new();
        let (r, d) = (5, 6);
        let f = feats(r, d, 1);
        let (out, _) = aggregate(&tape, &model, AggMode::NoAtt, &f).unwrap();
        // f_out = sum_n (R * theta_n - sum_r f_r) = R * colsum(theta) - N * colsum(f)
        let theta = model.param("agg.theta").to_vec();
        let fv = f.to_vec();
        let n = 3;
        for di in 0..d {
            let sum_theta: f64 = (0..n).map(|ni| theta[ni * d + di]).sum();
            let sum_f: f64 = (0..r).map(|ri| fv[ri * d + di]).sum();
            let want = r as f64 * sum_theta - n as f64 * sum_f;
            assert!((out.to_vec()[di] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn aggregation_modes_are_permutation_invariant() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for mode in [
            AggMode::MaxPool,
            AggMode::MeanPool,
            AggMode::NetVlad,
            AggMode::NoAtt,
            AggMode::PtAtt,
            AggMode::PnAtt,
            AggMode::MultiAtt,
        ] {
            let model = model_with(mode);
            let f = feats(6, 6, 42);
            let tape = Tape::new();
            let (base, _) = aggregate(&tape, &model, mode, &f).unwrap();
            let base = base.to_vec();

            let mut rows: Vec<Vec<f64>> = f
                .to_vec()
                .chunks(6)
                .map(|c| c.to_vec())
                .collect();
            rows.shuffle(&mut rng);
            let shuffled =
                Tensor::new(vec![6, 6], rows.into_iter().flatten().collect()).unwrap();
            let tape2 = Tape::new();
            let (permuted, _) = aggregate(&tape2, &model, mode, &shuffled).unwrap();
            for (a, b) in base.iter().zip(permuted.to_vec()) {
                assert!((a - b).abs() < 1e-9, "{mode}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn meanpool_is_row_mean() {
        let model = model_with(AggMode::MeanPool);
        let tape = Tape::new();
        let f = Tensor::new(vec![2, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let (out, _) = aggregate(&tape, &model, AggMode::MeanPool, &f).unwrap();
        assert_eq!(out.to_vec(), vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }
}
