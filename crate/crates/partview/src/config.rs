//! Run configuration.
//!
//! One flat JSON document drives generation, training and evaluation; keys
//! use the short symbol names (`V`, `K`, `N`, `S_R`, `S_L`, `lambda`, `eta`)
//! so configs read like the experiment tables they produce. Every field has
//! a default, so a partial file (or `{}`) is valid. See `docs/config.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the global branch aggregates the V*K region features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggMode {
    /// Elementwise max over regions.
    MaxPool,
    /// Elementwise mean over regions.
    MeanPool,
    /// Soft-assignment residual aggregation over learned centroids.
    NetVlad,
    /// Pattern residuals with both attention factors forced to ones.
    NoAtt,
    /// Learned region attention, pattern weights forced to ones.
    PtAtt,
    /// Region attention forced to ones, learned pattern weights.
    PnAtt,
    /// The full two-level attention mechanism.
    MultiAtt,
}

impl std::str::FromStr for AggMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<AggMode> {
        match s.to_ascii_lowercase().as_str() {
            "maxpool" => Ok(AggMode::MaxPool),
            "meanpool" => Ok(AggMode::MeanPool),
            "netvlad" => Ok(AggMode::NetVlad),
            "noatt" => Ok(AggMode::NoAtt),
            "ptatt" => Ok(AggMode::PtAtt),
            "pnatt" => Ok(AggMode::PnAtt),
            "multiatt" => Ok(AggMode::MultiAtt),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

impl std::fmt::Display for AggMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AggMode::MaxPool => "maxpool",
            AggMode::MeanPool => "meanpool",
            AggMode::NetVlad => "netvlad",
            AggMode::NoAtt => "noatt",
            AggMode::PtAtt => "ptatt",
            AggMode::PnAtt => "pnatt",
            AggMode::MultiAtt => "multiatt",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Views per shape.
    #[serde(rename = "V")]
    pub views: usize,
    /// Regions kept per view for the global branch.
    #[serde(rename = "K")]
    pub regions_per_view: usize,
    /// Part patterns in the global branch.
    #[serde(rename = "N")]
    pub patterns: usize,
    /// IoU threshold for positive anchors in the proposal module.
    #[serde(rename = "S_R")]
    pub s_r: f64,
    /// IoU threshold for positive proposals in the local branch.
    #[serde(rename = "S_L")]
    pub s_l: f64,
    /// Weight of the box-regression terms in the detection objective.
    pub lambda: f64,
    /// Weight of the classification objective in the combined loss.
    pub eta: f64,

    pub image_size: usize,
    pub classes: usize,
    /// Aggregated region feature dimension (RoI features are projected here).
    pub feature_dim: usize,
    pub backbone_channels: Vec<usize>,
    /// Anchor side = image_size / 32 * scale.
    pub anchor_scales: Vec<f64>,
    /// Height:width ratios of anchors at each scale.
    pub anchor_ratios: Vec<f64>,
    /// Greedy NMS overlap threshold before top-K selection; None disables.
    pub nms_threshold: Option<f64>,
    pub roi_pool: usize,
    pub det_hidden: usize,
    /// Sampled anchors per view for the proposal loss.
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    /// Sampled proposals per shape for the local branch loss.
    pub det_batch: usize,
    pub det_pos_fraction: f64,
    /// Detection output threshold on the local branch score.
    pub score_threshold: f64,
    /// NMS overlap for emitted detections.
    pub detect_nms: f64,

    pub aggregation: AggMode,
    /// Train the local detection branch (off reproduces the "no local
    /// branch" ablation).
    pub use_local_branch: bool,

    pub learning_rate: f64,
    /// Multiplier applied to the learning rate at the decay point.
    pub lr_decay: f64,
    /// When to decay, as a fraction of the total step budget.
    pub lr_decay_at: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Passes over each benchmark's training split.
    pub epochs: usize,
    /// Override the detection / classification pass counts separately.
    pub phi_epochs: Option<usize>,
    pub psi_epochs: Option<usize>,
    /// Steps per benchmark per alternation round.
    pub alternation_period: usize,
    pub seed: u64,

    /// Benchmark directories (detection and classification).
    pub phi: Option<PathBuf>,
    pub psi: Option<PathBuf>,
    /// Warm-start checkpoint loaded before training (missing heads keep
    /// their initialization).
    pub init_ckpt: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            views: 6,
            regions_per_view: 8,
            patterns: 16,
            s_r: 0.7,
            s_l: 0.5,
            lambda: 1.0,
            eta: 1.0,
            image_size: 96,
            classes: 4,
            feature_dim: 256,
            backbone_channels: vec![8, 16, 32],
            anchor_scales: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            anchor_ratios: vec![1.0, 2.0, 0.5],
            nms_threshold: Some(0.7),
            roi_pool: 7,
            det_hidden: 256,
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            det_batch: 64,
            det_pos_fraction: 0.25,
            score_threshold: 0.6,
            detect_nms: 0.3,
            aggregation: AggMode::MultiAtt,
            use_local_branch: true,
            learning_rate: 0.002,
            lr_decay: 0.25,
            lr_decay_at: 0.5,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 16,
            phi_epochs: None,
            psi_epochs: Some(6),
            alternation_period: 50,
            seed: 42,
            phi: None,
            psi: None,
            init_ckpt: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("config", msg));
        if !(0.0 < self.s_r && self.s_r < 1.0) {
            return bad(format!("S_R must lie in (0,1), got {}", self.s_r));
        }
        if !(0.0 < self.s_l && self.s_l < 1.0) {
            return bad(format!("S_L must lie in (0,1), got {}", self.s_l));
        }
        if self.eta < 0.0 {
            return bad(format!("eta must be nonnegative, got {}", self.eta));
        }
        if self.regions_per_view == 0 || self.patterns == 0 || self.views == 0 || self.classes == 0
        {
            return bad("V, K, N and the class count must all be at least 1".into());
        }
        if !self.anchor_scales.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!(
                "anchor scales must be strictly increasing, got {:?}",
                self.anchor_scales
            ));
        }
        if self.backbone_channels.is_empty() {
            return bad("backbone needs at least one stage".into());
        }
        if self.image_size % (1 << self.backbone_channels.len()) != 0 {
            return bad(format!(
                "image size {} is not divisible by the backbone downsampling factor {}",
                self.image_size,
                1 << self.backbone_channels.len()
            ));
        }
        Ok(())
    }

    /// Feature-map side length after the backbone.
    pub fn feature_grid(&self) -> usize {
        self.image_size >> self.backbone_channels.len()
    }

    /// Image pixels per feature cell.
    pub fn stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    /// Anchors per feature cell.
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// Flattened RoI feature length seen by the local branch.
    pub fn roi_dim(&self) -> usize {
        self.backbone_channels.last().unwrap() * self.roi_pool * self.roi_pool
    }

    pub fn phi_epochs(&self) -> usize {
        self.phi_epochs.unwrap_or(self.epochs)
    }

    pub fn psi_epochs(&self) -> usize {
        self.psi_epochs.unwrap_or(self.epochs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_symbol_keys_roundtrip() {
        let cfg = Config::default();
        let json = serde_json::to_string(&cfg).unwrap();
        for key in ["\"V\":6", "\"K\":8", "\"N\":16", "\"S_R\":0.7", "\"S_L\":0.5", "\"lambda\":1.0", "\"eta\":1.0"] {
            assert!(json.contains(key), "{key} missing in {json}");
        }
        let back: Config = serde_json::from_str(&json).unwrap();
        assert_eq!(back.views, 6);
        assert_eq!(back.s_r, 0.7);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg: Config = serde_json::from_str(r#"{"V": 12, "K": 20, "N": 256}"#).unwrap();
        assert_eq!(cfg.views, 12);
        assert_eq!(cfg.regions_per_view, 20);
        assert_eq!(cfg.patterns, 256);
        assert_eq!(cfg.s_r, 0.7);
        assert_eq!(cfg.image_size, 96);
    }

    #[test]
    fn default_grid_matches_stride() {
        let cfg = Config::default();
        assert_eq!(cfg.feature_grid(), 12);
        assert_eq!(cfg.stride(), 8);
        assert_eq!(cfg.anchors_per_cell(), 18);
    }

    #[test]
    fn validation_rejects_bad_thresholds() {
        let mut cfg = Config::default();
        cfg.s_r = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.anchor_scales = vec![4.0, 2.0];
        assert!(cfg.validate().is_err());
    }
}
