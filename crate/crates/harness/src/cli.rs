//! The `ssmg` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use ssmg_core::{DType, Real};
use ssmg_data::annotation::{corpus_stats, merge_corpus, one_to_many, AnnotationItem, OverlapRule, MERGE_RATIO};
use ssmg_data::jsonl;
use ssmg_data::synthetic::{gen_corpus, split, CorpusConfig, SyntheticItem};

use crate::bench::{bench_memory, write_csv, BenchConfig, BenchModel};
use crate::config::TrainConfig;
use crate::error::{config_err, Result};
use crate::evaluate::evaluate_checkpoint;
use crate::train::train;

#[derive(Debug, Parser)]
#[command(
    name = "ssmg",
    version,
    about = "Text-controlled selective state-space grounding of multivariate sequences"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, env = "SSMG_SEED")]
    pub seed: Option<u64>,
    /// Worker threads for data-parallel work.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Training precision (f32 or f64).
    #[arg(long, global = true)]
    pub dtype: Option<DType>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus as JSONL.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        /// Training corpus (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Validation corpus; without it a stratified split of `--data` is used.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Replace text-controlled selection with concatenation fusion.
        #[arg(long)]
        no_text_control: bool,
        /// Drop the relational graph branch.
        #[arg(long)]
        no_relational: bool,
        /// Scan forward in time only.
        #[arg(long)]
        unidirectional: bool,
    },
    /// Score a corpus with a checkpoint and write mAP tables.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON.
        #[arg(long)]
        out: PathBuf,
        /// Optional (threshold, mAP) CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Peak activation counts against sequence length, as CSV.
    BenchMemory {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated ascending lengths.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        /// Comma-separated subset of tm_mamba, attention_baseline, recurrent_baseline.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        /// Retained-scalar budget.
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Merge overlapping annotations and consolidate one-to-many queries.
    AugmentAnnotations {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = MERGE_RATIO)]
        ratio: f64,
        /// min, max or either.
        #[arg(long, default_value = "min")]
        rule: String,
    },
    /// Corpus statistics of an annotation file.
    Stats {
        #[arg(long)]
        input: PathBuf,
        /// Report JSON.
        #[arg(long)]
        out: PathBuf,
        /// Optional histogram CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Parses `argv` and runs it. Returns the process exit code: 2 for usage
/// errors, 1 for failures.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Resolves the training configuration from `--config` and flag overrides.
pub fn train_config(
    common: &Common,
    epochs: Option<usize>,
    no_text_control: bool,
    no_relational: bool,
    unidirectional: bool,
) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(d) = common.dtype {
        cfg.dtype = d;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let ab = &mut cfg.model.ablation;
    ab.text_control &= !no_text_control;
    ab.relational &= !no_relational;
    ab.bidirectional &= !unidirectional;
    cfg.validate()?;
    Ok(cfg)
}

fn run_train<T: Real>(
    cfg: &TrainConfig,
    train_items: &[SyntheticItem],
    val_items: &[SyntheticItem],
    out: &Path,
) -> Result<()> {
    let outcome = train::<T>(cfg, train_items, val_items, |e| {
        let val = e.val_map.map_or("-".to_string(), |m| format!("{m:.2}"));
        eprintln!(
            "epoch {:>3}  loss {:.5}  grad-norm {:.3}  val mAP {val}",
            e.epoch, e.train_loss, e.grad_norm
        );
    })?;
    outcome.save(out, cfg)?;
    let metrics = json!({
        "ablation": cfg.model.ablation.label(),
        "seed": cfg.seed,
        "log": outcome.log,
    });
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::GenData { out, items, length } => {
            let mut cfg: CorpusConfig = read_json(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(n) = items {
                cfg.items = n;
            }
            if let Some(l) = length {
                cfg.length = l;
            }
            let corpus = match common.workers {
                Some(w) => rayon::ThreadPoolBuilder::new()
                    .num_threads(w.max(1))
                    .build()
                    .map_err(|e| config_err(e.to_string()))?
                    .install(|| gen_corpus(&cfg))?,
                None => gen_corpus(&cfg)?,
            };
            create_parent(&out)?;
            jsonl::write(&out, &corpus)?;
            eprintln!("wrote {} items to {}", corpus.len(), out.display());
        }
        Command::Train {
            data,
            val,
            out,
            epochs,
            no_text_control,
            no_relational,
            unidirectional,
        } => {
            let cfg = train_config(common, epochs, no_text_control, no_relational, unidirectional)?;
            let corpus: Vec<SyntheticItem> = jsonl::read(&data)?;
            let (train_items, val_items) = match val {
                Some(p) => (corpus, jsonl::read(&p)?),
                None if cfg.val_fraction > 0.0 => split(&corpus, (1.0 - cfg.val_fraction, cfg.val_fraction), cfg.seed)?,
                None => (corpus, Vec::new()),
            };
            fs::create_dir_all(&out)?;
            match cfg.dtype {
                DType::F32 => run_train::<f32>(&cfg, &train_items, &val_items, &out)?,
                DType::F64 => run_train::<f64>(&cfg, &train_items, &val_items, &out)?,
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            csv,
        } => {
            let items: Vec<SyntheticItem> = jsonl::read(&data)?;
            let report = evaluate_checkpoint(&checkpoint, &items, common.workers.unwrap_or(1))?;
            create_parent(&out)?;
            fs::write(&out, serde_json::to_string_pretty(&report.to_json())?)?;
            if let Some(c) = csv {
                create_parent(&c)?;
                report.write_csv(fs::File::create(c)?)?;
            }
            println!("average mAP {:.2}", report.average);
        }
        Command::BenchMemory {
            out,
            lengths,
            models,
            cap,
        } => {
            let mut cfg: BenchConfig = read_json(common.config.as_deref())?;
            if let Some(l) = lengths {
                cfg.lengths = l;
            }
            if let Some(m) = models {
                cfg.models = m.iter().map(|s| s.parse()).collect::<Result<Vec<BenchModel>>>()?;
            }
            if let Some(c) = cap {
                cfg.cap = c;
            }
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let rows = bench_memory(&cfg)?;
            create_parent(&out)?;
            write_csv(&rows, fs::File::create(&out)?)?;
            for r in &rows {
                let peak = r.peak.map_or("out of memory".to_string(), |p| p.to_string());
                println!("{:<20} L={:<6} {peak}", r.model.name(), r.length);
            }
        }
        Command::AugmentAnnotations {
            input,
            out,
            ratio,
            rule,
        } => {
            let rule: OverlapRule = rule.parse()?;
            let items: Vec<AnnotationItem> = jsonl::read(&input)?;
            let merged = one_to_many(&merge_corpus(&items, ratio, rule)?);
            create_parent(&out)?;
            jsonl::write(&out, &merged)?;
            eprintln!("{} items in, {} items out", items.len(), merged.len());
        }
        Command::Stats { input, out, csv } => {
            let items: Vec<AnnotationItem> = jsonl::read(&input)?;
            let stats = corpus_stats(&items)?;
            create_parent(&out)?;
            fs::write(&out, serde_json::to_string_pretty(&stats)?)?;
            if let Some(c) = csv {
                create_parent(&c)?;
                stats.write_histograms_csv(fs::File::create(c)?)?;
            }
        }
    }
    Ok(())
}
