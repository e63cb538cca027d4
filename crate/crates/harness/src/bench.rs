//! Peak retained-activation counts of one training step against sequence
//! length.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ssmg_core::baselines::{AttentionBaseline, AttentionConfig, FrameModel, RecurrentBaseline, RecurrentConfig};
use ssmg_core::graph::SkeletonGraph;
use ssmg_core::model::{ModelConfig, TmMamba};
use ssmg_core::{Error as CoreError, Tape, Tensor};

use crate::error::{config_err, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchModel {
    TmMamba,
    AttentionBaseline,
    RecurrentBaseline,
}

impl BenchModel {
    pub const ALL: [BenchModel; 3] = [Self::TmMamba, Self::AttentionBaseline, Self::RecurrentBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Self::TmMamba => "tm_mamba",
            Self::AttentionBaseline => "attention_baseline",
            Self::RecurrentBaseline => "recurrent_baseline",
        }
    }
}

impl fmt::Display for BenchModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchModel {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err(format!("unknown benchmark model {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub models: Vec<BenchModel>,
    pub d_model: usize,
    pub num_nodes: usize,
    pub c_in: usize,
    pub state_size: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub recurrent_hidden: usize,
    /// Retained-scalar budget; runs that would exceed it are reported as
    /// out of memory.
    pub cap: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048, 4096],
            models: BenchModel::ALL.to_vec(),
            d_model: 64,
            num_nodes: 8,
            c_in: 3,
            state_size: 8,
            num_blocks: 1,
            num_heads: 8,
            recurrent_hidden: 16,
            cap: 300_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: BenchModel,
    pub length: usize,
    /// `None` when the run hit the cap.
    pub peak: Option<usize>,
}

fn step<M: FrameModel<f32>>(m: &M, cfg: &BenchConfig, len: usize, dq: usize) -> Result<Option<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let motion = Tensor::<f32>::randn([cfg.num_nodes, len, cfg.c_in], 1.0, &mut rng)?;
    let q = vec![1.0 / (dq as f32).sqrt(); dq];
    let labels: Vec<f32> = (0..len).map(|t| ((t / 16) % 2) as f32).collect();
    let mut tape = Tape::with_cap(cfg.cap);
    let mut grads = m.params().zero_grads();
    match m.forward_backward(&mut tape, &motion, &q, &labels, &mut grads) {
        Ok(_) => Ok(Some(tape.peak())),
        Err(CoreError::OutOfMemory { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// One forward and backward pass per model and length, in `f32`.
pub fn bench_memory(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.lengths.is_empty() || cfg.lengths.windows(2).any(|w| w[0] >= w[1]) || cfg.lengths[0] == 0 {
        return Err(config_err("lengths must be positive and strictly ascending"));
    }
    let max_len = *cfg.lengths.last().expect("non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &model in &cfg.models {
        let run: Box<dyn Fn(usize) -> Result<Option<usize>>> = match model {
            BenchModel::TmMamba => {
                let mc = ModelConfig {
                    d_model: cfg.d_model,
                    num_blocks: cfg.num_blocks,
                    state_size: cfg.state_size,
                    max_len,
                    c_in: cfg.c_in,
                    graph: SkeletonGraph::tree(cfg.num_nodes)?,
                    ..ModelConfig::default()
                };
                let m = TmMamba::<f32>::init(mc, &mut rng)?;
                Box::new(move |l| step(&m, cfg, l, cfg.d_model))
            }
            BenchModel::AttentionBaseline => {
                let ac = AttentionConfig {
                    d_model: cfg.d_model,
                    num_heads: cfg.num_heads,
                    num_nodes: cfg.num_nodes,
                    c_in: cfg.c_in,
                };
                let m = AttentionBaseline::<f32>::init(ac, &mut rng)?;
                Box::new(move |l| step(&m, cfg, l, cfg.d_model))
            }
            BenchModel::RecurrentBaseline => {
                let rc = RecurrentConfig {
                    hidden: cfg.recurrent_hidden,
                    num_nodes: cfg.num_nodes,
                    c_in: cfg.c_in,
                    d_query: cfg.d_model,
                };
                let m = RecurrentBaseline::<f32>::init(rc, &mut rng)?;
                Box::new(move |l| step(&m, cfg, l, cfg.d_model))
            }
        };
        for &length in &cfg.lengths {
            rows.push(BenchRow {
                model,
                length,
                peak: run(length)?,
            });
        }
    }
    Ok(rows)
}

/// `peak(2L) / peak(L)` for consecutive doubled lengths of one model.
pub fn doubling_ratios(rows: &[BenchRow], model: BenchModel) -> Vec<(usize, f64)> {
    let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.model == model).collect();
    mine.iter()
        .filter_map(|a| {
            let b = mine.iter().find(|b| b.length == 2 * a.length)?;
            Some((a.length, b.peak? as f64 / a.peak? as f64))
        })
        .collect()
}

/// `model,length,peak_activations,status` rows; capped runs read
/// `,out_of_memory`.
pub fn write_csv<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "length", "peak_activations", "status"])?;
    for r in rows {
        let (peak, status) = match r.peak {
            Some(p) => (p.to_string(), "ok"),
            None => (String::new(), "out_of_memory"),
        };
        out.write_record([r.model.name(), &r.length.to_string(), &peak, status])?;
    }
    out.flush()?;
    Ok(())
}
