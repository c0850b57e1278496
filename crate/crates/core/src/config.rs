//! Experiment configuration: model topology, optimization schedule, masking
//! policy, synthesis and evaluation settings, serialized as one JSON document.

use crate::augment::{BaselineAugment, MaskingPolicy};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::head::AnchorConfig;
use serde::{Deserialize, Serialize};
use sha2::Digest;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    /// Power of two; realized as a chain of stride-2 3×3 conv units.
    pub stride: usize,
    pub depth: usize,
}

impl StageSpec {
    /// Number of conv+norm+ReLU units and their strides. A stage of stride 2^e
    /// and depth d expands to max(d, max(e,1)) units whose first e units have
    /// stride 2 (a single 3×3 kernel cannot skip pixels).
    pub fn unit_strides(&self) -> Vec<usize> {
        let e = self.stride.trailing_zeros() as usize;
        let n = self.depth.max(e.max(1));
        (0..n).map(|i| if i < e { 2 } else { 1 }).collect()
    }
}

/// Index of the stage after which hybrid attention runs (the first block).
pub const HA_INSERTION_INDEX: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_specs: Vec<StageSpec>,
    /// Output channels of each fusion level (last min(3,B) stages).
    pub fusion_channels: Vec<usize>,
    /// Hybrid attention after the first stage; false trains the bypass variant.
    pub use_ha: bool,
    pub anchors: AnchorConfig,
    /// Std of the normal initializer for all convolutions and projections.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_specs: vec![
                StageSpec { channels: 8, stride: 8, depth: 1 },
                StageSpec { channels: 16, stride: 1, depth: 1 },
                StageSpec { channels: 32, stride: 2, depth: 1 },
                StageSpec { channels: 64, stride: 2, depth: 1 },
            ],
            fusion_channels: vec![32, 48, 64],
            use_ha: true,
            anchors: AnchorConfig::default(),
            init_std: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = self.stage_specs.len();
        if b < 2 {
            return Err(Error::validation(
                "at least two stages required (attention sits after the first)",
            ));
        }
        for (i, s) in self.stage_specs.iter().enumerate() {
            if s.channels == 0 || s.depth == 0 {
                return Err(Error::validation(format!("stage {i} has empty dimensions")));
            }
            if s.stride == 0 || !s.stride.is_power_of_two() {
                return Err(Error::validation(format!(
                    "stage {i} stride {} is not a power of two",
                    s.stride
                )));
            }
        }
        if self.fusion_channels.len() != self.fusion_levels() {
            return Err(Error::validation(format!(
                "{} fusion channel entries for {} fusion levels",
                self.fusion_channels.len(),
                self.fusion_levels()
            )));
        }
        if self.fusion_channels.iter().any(|&c| c == 0) {
            return Err(Error::validation("fusion channels must be positive"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::validation("init std must be positive"));
        }
        self.anchors.validate(self.fusion_levels())?;
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_specs.len()
    }

    /// Fusion taps the last min(3, B) stage outputs.
    pub fn fusion_levels(&self) -> usize {
        self.num_stages().min(3)
    }

    pub fn fusion_stage_indices(&self) -> std::ops::Range<usize> {
        self.num_stages() - self.fusion_levels()..self.num_stages()
    }

    /// Cumulative stride after each stage.
    pub fn cumulative_strides(&self) -> Vec<usize> {
        let mut acc = 1;
        self.stage_specs
            .iter()
            .map(|s| {
                acc *= s.stride;
                acc
            })
            .collect()
    }

    /// Strides of the pyramid levels fed to the detector.
    pub fn pyramid_strides(&self) -> Vec<usize> {
        let cum = self.cumulative_strides();
        self.fusion_stage_indices().map(|i| cum[i]).collect()
    }

    pub fn total_stride(&self) -> usize {
        *self.cumulative_strides().last().expect("nonempty stages")
    }

    /// Hash of the canonical JSON form; stored in checkpoints.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("model config serialization");
        let mut hasher = sha2::Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by gamma.
    pub decay_epochs: Vec<usize>,
    pub gamma: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_epochs: vec![20, 36],
            gamma: 0.1,
            lambda: 1.0,
            seed: 1,
            patience: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::validation("epochs, batch size and patience must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must lie in [0,1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation("weight decay must be non-negative"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::validation("gamma must lie in (0,1]"));
        }
        if self.decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::validation("decay epochs must precede the last epoch"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::validation("lambda must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect for a given epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.gamma.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    /// Ground truths shorter than this many pixels are ignored (the
    /// reasonable-subset predicate); scale it with the image size.
    pub min_height: f64,
    pub score_floor: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            min_height: 55.0,
            score_floor: 0.01,
            nms_iou: 0.45,
            top_k: 200,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for v in [self.iou_thresh, self.nms_iou] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::validation("IoU thresholds must lie in (0,1)"));
            }
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(Error::validation("score floor must lie in [0,1)"));
        }
        if self.min_height < 0.0 {
            return Err(Error::validation("min height must be non-negative"));
        }
        if self.top_k == 0 {
            return Err(Error::validation("top_k must be positive"));
        }
        Ok(())
    }
}

/// Everything one experiment needs, loadable from a single JSON file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub masking: MaskingPolicy,
    pub baseline_aug: BaselineAugment,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.masking.validate()?;
        self.baseline_aug.validate()?;
        self.eval.validate()?;
        let stride = self.model.total_stride();
        if self.synth.height % stride != 0 || self.synth.width % stride != 0 {
            return Err(Error::validation(format!(
                "image {}x{} not divisible by total stride {stride}",
                self.synth.height, self.synth.width
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("config serialization");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}
