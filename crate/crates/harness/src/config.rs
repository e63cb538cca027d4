//! Training and evaluation configuration, read from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ssmg_core::model::{Ablation, ModelConfig};
use ssmg_core::DType;
use ssmg_data::eval::{NMS_IOU, SCORE_THRESHOLDS};

use crate::error::{config_err, Result};

/// Post-processing applied to frame scores before mAP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_thresholds: Vec<f64>,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresholds: SCORE_THRESHOLDS.to_vec(),
            nms_iou: NMS_IOU,
        }
    }
}

/// How query ids become vectors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    /// Seed of the random unit embedding table.
    pub seed: u64,
    /// Train the table jointly with the model.
    pub learnable: bool,
}

/// Everything `train` needs besides the data. The ablation switches live in
/// `model.ablation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub dtype: DType,
    /// Threads for per-item gradients and evaluation. Results do not depend
    /// on it.
    pub workers: usize,
    /// Validation share when `train` receives a single corpus.
    pub val_fraction: f64,
    pub model: ModelConfig,
    pub query: QueryConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            grad_clip_norm: 1.0,
            dtype: DType::F64,
            workers: 1,
            val_fraction: 0.2,
            model: ModelConfig::default(),
            query: QueryConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.learning_rate) || !finite_nonneg(self.weight_decay) {
            return Err(config_err(
                "learning_rate and weight_decay must be finite and non-negative",
            ));
        }
        if !finite_nonneg(self.grad_clip_norm) {
            return Err(config_err("grad_clip_norm must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return Err(config_err("batch_size and workers must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err("val_fraction must lie in [0, 1)"));
        }
        if self.eval.score_thresholds.is_empty()
            || self.eval.score_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0))
            || self.eval.score_thresholds.windows(2).any(|w| w[0] > w[1])
        {
            return Err(config_err("score thresholds must be ascending values in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.eval.nms_iou) {
            return Err(config_err("nms_iou must lie in [0, 1)"));
        }
        self.model.validate()?;
        Ok(())
    }

    /// A single-block, width-32 model trained in f32 for four epochs at a
    /// high learning rate. Fits a few hundred length-256 items on one core
    /// in about two minutes.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 4,
            dtype: DType::F32,
            model: ModelConfig {
                d_model: 32,
                num_blocks: 1,
                state_size: 8,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.model.ablation = ablation;
        self
    }
}
