//! Mini-batch AdamW training of the grounding network.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use ssmg_core::model::{TmMamba, LOSS_EPS};
use ssmg_core::params::{Grads, ParamStore};
use ssmg_core::{Real, Tape, Tensor};
use ssmg_data::synthetic::{QueryEmbeddingProvider, SyntheticItem};

use crate::config::TrainConfig;
use crate::error::{config_err, HarnessError, Result};
use crate::evaluate::{evaluate_model, pool};
use crate::optim::{clip_grad_norm, AdamW};

/// Parameter name of a learnable query table.
pub const QUERY_TABLE: &str = "query.table";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over batches of the batch-mean loss.
    pub train_loss: f64,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    /// Average mAP (percent) on the validation items.
    pub val_map: Option<f64>,
}

pub struct TrainOutcome<T: Real> {
    pub model: TmMamba<T>,
    pub queries: QueryEmbeddingProvider,
    pub log: Vec<EpochLog>,
}

/// Checks that items fit the model's node count, channels and length.
pub fn check_items<T: Real>(model: &TmMamba<T>, items: &[SyntheticItem]) -> Result<()> {
    let c = &model.config;
    for (i, it) in items.iter().enumerate() {
        if it.num_nodes() != c.num_nodes() || it.c_in() != c.c_in {
            return Err(HarnessError::Mismatch(format!(
                "item {i} has {} nodes x {} channels, model expects {} x {}",
                it.num_nodes(),
                it.c_in(),
                c.num_nodes(),
                c.c_in
            )));
        }
        if it.length() > c.max_len {
            return Err(HarnessError::Mismatch(format!(
                "item {i} has {} frames, model accepts at most {}",
                it.length(),
                c.max_len
            )));
        }
    }
    Ok(())
}

pub(crate) fn query_vec<T: Real>(queries: &QueryEmbeddingProvider, id: usize) -> Result<Vec<T>> {
    Ok(queries.embed(id)?.iter().map(|&x| T::c(x)).collect())
}

fn table_tensor<T: Real>(queries: &QueryEmbeddingProvider) -> Result<Tensor<T>> {
    let rows = queries.rows();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_f64([rows.len(), queries.dim()], &flat)?)
}

/// Loss and gradients of one item. With a `table`, the query row is read
/// from it on the tape and its gradient is returned too.
fn item_grads<T: Real>(
    model: &TmMamba<T>,
    queries: &QueryEmbeddingProvider,
    table: Option<&Tensor<T>>,
    item: &SyntheticItem,
) -> Result<(f64, Grads<T>, Option<Vec<T>>)> {
    let motion = item.motion_tensor::<T>();
    let labels: Vec<T> = item.labels().iter().map(|&y| T::c(y as f64)).collect();
    let Some(table) = table else {
        let q = query_vec::<T>(queries, item.query_id)?;
        let (loss, grads) = model.loss_and_grads(&motion, &q, &labels)?;
        return Ok((loss.as_f64(), grads, None));
    };
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape)?;
    let tv = tape.param(table)?;
    let row = tape.slice(tv, 0, item.query_id, 1)?;
    let q = tape.reshape(row, [queries.dim()])?;
    let m = tape.constant(&motion)?;
    let s = model.scores_on_tape(&mut tape, &bound, m, q)?;
    let loss = tape.bce(s, &labels, T::c(LOSS_EPS))?;
    let value = tape.value(loss)?[0].as_f64();
    tape.backward(loss)?;
    let mut grads = model.params.zero_grads();
    bound.accumulate_grads(&tape, &mut grads)?;
    let tg = tape.grad(tv)?.map(<[T]>::to_vec);
    Ok((value, grads, tg))
}

fn query_table_size(items: &[&[SyntheticItem]]) -> usize {
    items
        .iter()
        .flat_map(|s| s.iter())
        .map(|i| i.query_id + 1)
        .max()
        .unwrap_or(1)
}

/// Trains a fresh model on `train`, reporting each epoch to `on_epoch`.
/// With a single worker or many, the same seed gives the same model and
/// log.
pub fn train<T: Real>(
    config: &TrainConfig,
    train: &[SyntheticItem],
    val: &[SyntheticItem],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() {
        return Err(config_err("training corpus is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = TmMamba::<T>::init(config.model.clone(), &mut rng)?;
    check_items(&model, train)?;
    check_items(&model, val)?;
    let size = query_table_size(&[train, val]);
    let mut queries = if config.query.learnable {
        QueryEmbeddingProvider::learnable(size, config.model.d_model, config.query.seed)?
    } else {
        QueryEmbeddingProvider::frozen(size, config.model.d_model, config.query.seed)?
    };
    let mut table_store = ParamStore::<T>::new();
    if queries.learnable {
        table_store.insert(QUERY_TABLE, table_tensor(&queries)?)?;
    }
    let mut opt = AdamW::<T>::new();
    let mut table_opt = AdamW::<T>::new();
    let workers = pool(config.workers)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let table = table_store.get(QUERY_TABLE).ok();
            let results: Vec<Result<_>> = workers.install(|| {
                batch
                    .par_iter()
                    .map(|&i| item_grads(&model, &queries, table, &train[i]))
                    .collect()
            });
            let mut grads = model.params.zero_grads();
            let mut table_grad: Option<Vec<T>> = None;
            let mut loss = 0.0;
            for r in results {
                let (l, g, tg) = r?;
                loss += l;
                for (name, acc) in grads.iter_mut() {
                    acc.iter_mut().zip(&g[name]).for_each(|(a, &x)| *a += x);
                }
                if let Some(tg) = tg {
                    match &mut table_grad {
                        Some(acc) => acc.iter_mut().zip(&tg).for_each(|(a, &x)| *a += x),
                        None => table_grad = Some(tg),
                    }
                }
            }
            let n = batch.len() as f64;
            loss /= n;
            if !loss.is_finite() {
                return Err(HarnessError::Diverged { epoch, batch: b, loss });
            }
            if let Some(tg) = table_grad {
                grads.insert(QUERY_TABLE.to_string(), tg);
            }
            let inv = T::c(1.0 / n);
            grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= inv);
            norm_sum += clip_grad_norm(&mut grads, config.grad_clip_norm);
            if let Some(tg) = grads.remove(QUERY_TABLE) {
                let tg = BTreeMap::from([(QUERY_TABLE.to_string(), tg)]);
                table_opt.update(&mut table_store, &tg, config.learning_rate, config.weight_decay)?;
            }
            opt.update(&mut model.params, &grads, config.learning_rate, config.weight_decay)?;
            loss_sum += loss;
            batches += 1;
        }
        if let Ok(t) = table_store.get(QUERY_TABLE) {
            let d = queries.dim();
            for (row, chunk) in queries.rows_mut().iter_mut().zip(t.data().chunks(d)) {
                row.iter_mut().zip(chunk).for_each(|(r, &x)| *r = x.as_f64());
            }
        }
        let val_map = if val.is_empty() {
            None
        } else {
            Some(evaluate_model(&model, &queries, val, &config.eval, config.workers)?.average)
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            grad_norm: norm_sum / batches as f64,
            val_map,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, queries, log })
}

/// Mean per-item loss.
pub fn mean_loss<T: Real>(
    model: &TmMamba<T>,
    queries: &QueryEmbeddingProvider,
    items: &[SyntheticItem],
    workers: usize,
) -> Result<f64> {
    let losses: Vec<Result<f64>> = pool(workers)?.install(|| {
        items
            .par_iter()
            .map(|it| {
                let q = query_vec::<T>(queries, it.query_id)?;
                let s = model.forward(&it.motion_tensor::<T>(), &q)?;
                let labels: Vec<T> = it.labels().iter().map(|&y| T::c(y as f64)).collect();
                Ok(ssmg_core::model::loss_ce(&s, &labels)?.as_f64())
            })
            .collect()
    });
    let sum = losses.into_iter().sum::<Result<f64>>()?;
    Ok(sum / items.len().max(1) as f64)
}

impl<T: Real> TrainOutcome<T> {
    /// Writes the checkpoint with the query table and training log in its
    /// metadata.
    pub fn save(&self, dir: impl AsRef<Path>, config: &TrainConfig) -> Result<()> {
        let meta = BTreeMap::from([
            ("queries".to_string(), serde_json::to_value(&self.queries)?),
            ("train_config".to_string(), serde_json::to_value(config)?),
            ("log".to_string(), serde_json::to_value(&self.log)?),
            ("eval".to_string(), json!(config.eval)),
        ]);
        self.model.save(dir, meta)?;
        Ok(())
    }
}
