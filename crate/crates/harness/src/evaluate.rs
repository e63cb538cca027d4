//! Frame scores to mAP, for live models and checkpoints.

use std::path::Path;

use rayon::prelude::*;
use ssmg_core::model::TmMamba;
use ssmg_core::Real;
use ssmg_data::eval::{map_suite, predict_segments, EvalItem, MapReport};
use ssmg_data::synthetic::{QueryEmbeddingProvider, SyntheticItem};

use crate::config::EvalConfig;
use crate::error::{config_err, HarnessError, Result};
use crate::train::{check_items, query_vec};

pub(crate) fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| config_err(e.to_string()))
}

/// Per-frame scores of every item, in item order.
pub fn frame_scores<T: Real>(
    model: &TmMamba<T>,
    queries: &QueryEmbeddingProvider,
    items: &[SyntheticItem],
    workers: usize,
) -> Result<Vec<Vec<f64>>> {
    check_items(model, items)?;
    pool(workers)?.install(|| {
        items
            .par_iter()
            .map(|it| {
                let q = query_vec::<T>(queries, it.query_id)?;
                let s = model.forward(&it.motion_tensor::<T>(), &q)?;
                Ok(s.s.iter().map(|x| x.as_f64()).collect())
            })
            .collect()
    })
}

/// Threshold sweep and NMS on each score vector, paired with ground truth.
pub fn eval_items(scores: &[Vec<f64>], items: &[SyntheticItem], cfg: &EvalConfig) -> Result<Vec<EvalItem>> {
    if scores.len() != items.len() {
        return Err(config_err("one score vector per item is required"));
    }
    scores
        .iter()
        .zip(items)
        .map(|(s, it)| {
            if s.len() != it.length() {
                return Err(config_err("score vector length differs from the item"));
            }
            let preds = predict_segments(s, &cfg.score_thresholds, cfg.nms_iou)?;
            Ok(EvalItem::new(it.query_id, preds, it.segments().to_vec())?)
        })
        .collect()
}

pub fn evaluate_scores(scores: &[Vec<f64>], items: &[SyntheticItem], cfg: &EvalConfig) -> Result<MapReport> {
    Ok(map_suite(&eval_items(scores, items, cfg)?)?)
}

pub fn evaluate_model<T: Real>(
    model: &TmMamba<T>,
    queries: &QueryEmbeddingProvider,
    items: &[SyntheticItem],
    cfg: &EvalConfig,
    workers: usize,
) -> Result<MapReport> {
    evaluate_scores(&frame_scores(model, queries, items, workers)?, items, cfg)
}

/// A model read back from a training checkpoint.
pub struct Trained {
    pub model: TmMamba<f64>,
    pub queries: QueryEmbeddingProvider,
    pub eval: EvalConfig,
}

pub fn load_trained(dir: impl AsRef<Path>) -> Result<Trained> {
    let (model, manifest) = TmMamba::<f64>::load(dir)?;
    let queries: QueryEmbeddingProvider = serde_json::from_value(
        manifest
            .meta
            .get("queries")
            .cloned()
            .ok_or_else(|| config_err("checkpoint has no query table"))?,
    )?;
    if queries.dim() != model.config.d_model {
        return Err(HarnessError::Mismatch("query width differs from d_model".into()));
    }
    let eval = match manifest.meta.get("eval") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => EvalConfig::default(),
    };
    Ok(Trained { model, queries, eval })
}

/// Reads a checkpoint and scores `items` with it. The checkpoint directory
/// is only read.
pub fn evaluate_checkpoint(dir: impl AsRef<Path>, items: &[SyntheticItem], workers: usize) -> Result<MapReport> {
    let t = load_trained(dir)?;
    if let Some(it) = items.iter().find(|i| i.query_id >= t.queries.num_motifs()) {
        return Err(HarnessError::Mismatch(format!(
            "query {} has no embedding in the checkpoint",
            it.query_id
        )));
    }
    evaluate_model(&t.model, &t.queries, items, &t.eval, workers)
}
