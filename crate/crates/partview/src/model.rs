//! Model parameters and forward passes.
//!
//! One [`ModelState`] owns every learnable tensor: the convolutional
//! backbone, the proposal heads, the local detection head, the region
//! feature projection, the pattern/attention parameters of the global branch
//! and the classifier. Parameters are created in a fixed order from a seeded
//! generator, so identical configs initialize identically.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AggMode, Config};
use crate::error::{Error, Result};
use crate::geometry::Box2;
use crate::shapegen::Raster;
use crate::tensor::{Parameter, Tape, Tensor};

pub struct ModelState {
    pub cfg: Config,
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ModelState {
    pub fn new(cfg: &Config) -> Result<ModelState> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = Builder {
            rng: &mut rng,
            params: Vec::new(),
        };

        // Backbone: conv 3x3 (pad 1) + relu + maxpool 2 per stage.
        let mut in_ch = 1;
        for (i, &out_ch) in cfg.backbone_channels.iter().enumerate() {
            b.conv(&format!("backbone.conv{i}"), out_ch, in_ch, 3);
            in_ch = out_ch;
        }
        let f = in_ch;
        let a = cfg.anchors_per_cell();

        // Proposal heads.
        b.conv("rpn.conv", f, f, 3);
        b.conv("rpn.score", a, f, 1);
        b.conv("rpn.delta", 4 * a, f, 1);

        // Local detection head.
        let d_roi = cfg.roi_dim();
        let h = cfg.det_hidden;
        b.linear("det.fc1", d_roi, h);
        b.linear("det.fc2", h, h);
        b.linear("det.score", h, 1);
        b.linear("det.delta", h, 4);

        // Region feature projection for the global branch.
        b.linear("proj", d_roi, cfg.feature_dim);

        // Patterns and attention.
        let (n, c, d) = (cfg.patterns, cfg.classes, cfg.feature_dim);
        b.matrix("agg.theta", n, d, d);
        b.matrix("agg.key", n, d, d);
        b.zeros("agg.key_bias", vec![n]);
        b.matrix("agg.w1", n, n, n);
        b.matrix("agg.w2", n, c, c);
        b.matrix("agg.map", d, 1, d);
        b.zeros("agg.map_bias", vec![n]);

        // Classifier.
        b.matrix("cls.weight", c, d, d);
        b.zeros("cls.bias", vec![c]);

        if cfg.aggregation == AggMode::NetVlad {
            b.matrix("vlad.assign", d, n, d);
            b.zeros("vlad.assign_bias", vec![n]);
            b.matrix("vlad.centroids", n, d, d);
            b.matrix("vlad.proj", n * d, d, n * d);
            b.zeros("vlad.proj_bias", vec![d]);
        }

        let params = b.params;
        let mut index = BTreeMap::new();
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::invalid("model", format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(ModelState {
            cfg: cfg.clone(),
            params,
            index,
        })
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[self.index[name]].tensor
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::save(path, &self.params)
    }

    /// Builds a fresh state for `cfg` and overwrites its values from a
    /// checkpoint. Every parameter of the model must be present with a
    /// matching shape.
    pub fn load(cfg: &Config, path: &Path) -> Result<ModelState> {
        let state = ModelState::new(cfg)?;
        let loaded = crate::checkpoint::load(path)?;
        let by_name: BTreeMap<&str, &Parameter> =
            loaded.iter().map(|p| (p.name.as_str(), p)).collect();
        for p in &state.params {
            let Some(src) = by_name.get(p.name.as_str()) else {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!("parameter {:?} missing from checkpoint", p.name),
                });
            };
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!(
                        "parameter {:?} has shape {:?}, expected {:?}",
                        p.name,
                        src.tensor.shape(),
                        p.tensor.shape()
                    ),
                });
            }
            p.tensor.set_data(&src.tensor.data());
        }
        Ok(state)
    }

    /// Like [`ModelState::load`] but tolerates parameters absent from the
    /// checkpoint (they keep their seeded initialization). Used when warm
    /// starting a model whose head set differs, e.g. ablation variants.
    pub fn load_partial(cfg: &Config, path: &Path) -> Result<ModelState> {
        let state = ModelState::new(cfg)?;
        let loaded = crate::checkpoint::load(path)?;
        let by_name: BTreeMap<&str, &Parameter> =
            loaded.iter().map(|p| (p.name.as_str(), p)).collect();
        for p in &state.params {
            if let Some(src) = by_name.get(p.name.as_str()) {
                if src.tensor.shape() != p.tensor.shape() {
                    return Err(Error::Checkpoint {
                        path: path.to_path_buf(),
                        msg: format!(
                            "parameter {:?} has shape {:?}, expected {:?}",
                            p.name,
                            src.tensor.shape(),
                            p.tensor.shape()
                        ),
                    });
                }
                p.tensor.set_data(&src.tensor.data());
            }
        }
        Ok(state)
    }

    // ---- forward passes ----

    /// Shaded 8-bit raster to a normalized `1 x H x W` constant tensor.
    pub fn raster_tensor(raster: &Raster) -> Tensor {
        let data: Vec<f64> = raster.data.iter().map(|&v| v as f64 / 255.0 - 0.5).collect();
        Tensor::new(vec![1, raster.height, raster.width], data).expect("raster tensor")
    }

    /// Backbone features for one view: each stage is conv/relu/maxpool, so a
    /// 96 px view becomes `F x 12 x 12` at the default three stages.
    pub fn backbone_forward(&self, tape: &Tape, view: &Tensor) -> Result<Tensor> {
        let expect = vec![1, self.cfg.image_size, self.cfg.image_size];
        if view.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "backbone_forward",
                lhs: view.shape(),
                rhs: expect,
            });
        }
        let mut x = view.clone();
        for i in 0..self.cfg.backbone_channels.len() {
            let w = self.param(&format!("backbone.conv{i}.weight"));
            let b = self.param(&format!("backbone.conv{i}.bias"));
            x = tape.conv2d(&x, w, Some(b), 1, 1)?;
            x = tape.relu(&x)?;
            x = tape.maxpool2d(&x, 2, 2)?;
        }
        Ok(x)
    }

    /// Proposal head outputs reordered to anchor enumeration order:
    /// score logits `[J]` and offsets `[J, 4]`.
    pub fn rpn_forward(&self, tape: &Tape, featmap: &Tensor) -> Result<(Tensor, Tensor)> {
        let shape = featmap.shape();
        let (gh, gw) = (shape[1], shape[2]);
        let a = self.cfg.anchors_per_cell();
        let h = tape.conv2d(
            featmap,
            self.param("rpn.conv.weight"),
            Some(self.param("rpn.conv.bias")),
            1,
            1,
        )?;
        let h = tape.relu(&h)?;
        let score_map = tape.conv2d(
            &h,
            self.param("rpn.score.weight"),
            Some(self.param("rpn.score.bias")),
            1,
            0,
        )?;
        let delta_map = tape.conv2d(
            &h,
            self.param("rpn.delta.weight"),
            Some(self.param("rpn.delta.bias")),
            1,
            0,
        )?;

        // Channel-major maps to anchor-major vectors.
        let cells = gh * gw;
        let mut score_idx = Vec::with_capacity(cells * a);
        let mut delta_idx = Vec::with_capacity(cells * a * 4);
        for cell in 0..cells {
            for ai in 0..a {
                score_idx.push(ai * cells + cell);
                for coord in 0..4 {
                    delta_idx.push((ai * 4 + coord) * cells + cell);
                }
            }
        }
        let scores = tape.gather(&score_map, &score_idx)?;
        let deltas = tape.gather(&delta_map, &delta_idx)?;
        let deltas = tape.reshape(&deltas, vec![cells * a, 4])?;
        Ok((scores, deltas))
    }

    /// RoI features for a set of boxes in image coordinates: each box is
    /// pooled to `F x P x P` on the feature map and flattened, producing a
    /// `len(boxes) x D_roi` matrix.
    pub fn roi_features(&self, tape: &Tape, featmap: &Tensor, boxes: &[Box2]) -> Result<Tensor> {
        let p = self.cfg.roi_pool;
        let d_roi = self.cfg.roi_dim();
        let inv_stride = 1.0 / self.cfg.stride() as f64;
        let mut rows = Vec::with_capacity(boxes.len());
        for b in boxes {
            let fb = b.scaled(inv_stride);
            let pooled = tape.roi_pool(featmap, &fb, p, p)?;
            rows.push(tape.reshape(&pooled, vec![1, d_roi])?);
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        tape.concat(&refs)
    }

    /// Local branch head: per-region score logit `[R]` and offsets `[R, 4]`.
    pub fn detection_forward(&self, tape: &Tape, roi_feats: &Tensor) -> Result<(Tensor, Tensor)> {
        let h1 = self.linear_forward(tape, roi_feats, "det.fc1")?;
        let h1 = tape.relu(&h1)?;
        let h2 = self.linear_forward(tape, &h1, "det.fc2")?;
        let h2 = tape.relu(&h2)?;
        let score = self.linear_forward(tape, &h2, "det.score")?;
        let rows = roi_feats.shape()[0];
        let score = tape.reshape(&score, vec![rows])?;
        let delta = self.linear_forward(tape, &h2, "det.delta")?;
        Ok((score, delta))
    }

    /// Projects raw RoI features to the aggregated feature dimension.
    pub fn project_regions(&self, tape: &Tape, roi_feats: &Tensor) -> Result<Tensor> {
        self.linear_forward(tape, roi_feats, "proj")
    }

    fn linear_forward(&self, tape: &Tape, x: &Tensor, name: &str) -> Result<Tensor> {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(&y, b)
    }
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    params: Vec<Parameter>,
}

impl Builder<'_> {
    fn uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-scale..scale)).collect();
        Tensor::new(shape, data).expect("init shape")
    }

    fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize) {
        let w = self.uniform(vec![out_ch, in_ch, k, k], in_ch * k * k);
        self.params.push(Parameter::new(format!("{name}.weight"), w));
        self.params
            .push(Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![out_ch])));
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        let w = self.uniform(vec![d_in, d_out], d_in);
        self.params.push(Parameter::new(format!("{name}.weight"), w));
        self.params
            .push(Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![d_out])));
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) {
        let w = self.uniform(vec![rows, cols], fan_in);
        self.params.push(Parameter::new(name.to_string(), w));
    }

    fn zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.params
            .push(Parameter::new(name.to_string(), Tensor::zeros(shape)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.image_size = 32;
        cfg.backbone_channels = vec![4, 8];
        cfg.feature_dim = 16;
        cfg.patterns = 4;
        cfg.det_hidden = 32;
        cfg
    }

    #[test]
    fn default_backbone_outputs_expected_grid() {
        let cfg = Config::default();
        let model = ModelState::new(&cfg).unwrap();
        let tape = Tape::new();
        let view = Tensor::zeros(vec![1, 96, 96]);
        let fm = model.backbone_forward(&tape, &view).unwrap();
        assert_eq!(fm.shape(), vec![32, 12, 12]);
        assert!(fm.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_views_give_identical_features() {
        let cfg = small_cfg();
        let model = ModelState::new(&cfg).unwrap();
        let raster = Raster {
            width: 32,
            height: 32,
            data: (0..32 * 32).map(|i| (i % 251) as u8).collect(),
        };
        let tape = Tape::new();
        let v = ModelState::raster_tensor(&raster);
        let a = model.backbone_forward(&tape, &v).unwrap();
        let b = model.backbone_forward(&tape, &v).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn rpn_outputs_match_anchor_counts() {
        let cfg = Config::default();
        let model = ModelState::new(&cfg).unwrap();
        let tape = Tape::new();
        let view = Tensor::zeros(vec![1, 96, 96]);
        let fm = model.backbone_forward(&tape, &view).unwrap();
        let (scores, deltas) = model.rpn_forward(&tape, &fm).unwrap();
        assert_eq!(scores.shape(), vec![2592]);
        assert_eq!(deltas.shape(), vec![2592, 4]);
    }

    #[test]
    fn rpn_scores_in_unit_interval_after_sigmoid() {
        let cfg = small_cfg();
        let model = ModelState::new(&cfg).unwrap();
        let tape = Tape::new();
        let view = Tensor::full(vec![1, 32, 32], 0.3);
        let fm = model.backbone_forward(&tape, &view).unwrap();
        let (logits, _) = model.rpn_forward(&tape, &fm).unwrap();
        let probs = tape.sigmoid(&logits).unwrap();
        assert!(probs.to_vec().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn detection_head_shapes() {
        let cfg = small_cfg();
        let model = ModelState::new(&cfg).unwrap();
        let tape = Tape::new();
        let feats = Tensor::full(vec![5, cfg.roi_dim()], 0.1);
        let (score, delta) = model.detection_forward(&tape, &feats).unwrap();
        assert_eq!(score.shape(), vec![5]);
        assert_eq!(delta.shape(), vec![5, 4]);
        let p = tape.sigmoid(&score).unwrap();
        assert!(p.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_cfg();
        let a = ModelState::new(&cfg).unwrap();
        let b = ModelState::new(&cfg).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.to_vec(), pb.tensor.to_vec());
        }
    }

    #[test]
    fn checkpoint_roundtrip_through_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = small_cfg();
        let model = ModelState::new(&cfg).unwrap();
        model.save(&path).unwrap();
        let loaded = ModelState::load(&cfg, &path).unwrap();
        for (pa, pb) in model.params().iter().zip(loaded.params()) {
            let av = pa.tensor.to_vec();
            let bv = pb.tensor.to_vec();
            assert_eq!(av.len(), bv.len());
            for (x, y) in av.iter().zip(&bv) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", pa.name);
            }
        }
    }
}
