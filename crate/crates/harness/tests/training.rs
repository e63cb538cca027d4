use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssmg_core::model::{Ablation, TmMamba};
use ssmg_data::synthetic::{gen_corpus, CorpusConfig, QueryEmbeddingProvider, SyntheticItem};
use ssmg_harness::evaluate::{evaluate_checkpoint, evaluate_model, evaluate_scores};
use ssmg_harness::train::{mean_loss, train};
use ssmg_harness::{EvalConfig, HarnessError, TrainConfig};

fn corpus(items: usize, c_in: usize, seed: u64) -> Vec<SyntheticItem> {
    gen_corpus(&CorpusConfig {
        items,
        length: 96,
        c_in,
        seed,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.model.d_model = 8;
    c.model.state_size = 4;
    c.epochs = 1;
    c.batch_size = 4;
    c
}

fn initial_state(cfg: &TrainConfig, motifs: usize) -> (TmMamba<f64>, QueryEmbeddingProvider) {
    let model = TmMamba::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let queries = QueryEmbeddingProvider::frozen(motifs, cfg.model.d_model, cfg.query.seed).unwrap();
    (model, queries)
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn one_epoch_on_ten_items_reduces_the_loss() {
    let items = corpus(10, 3, 1);
    let mut cfg = small_config();
    cfg.dtype = ssmg_core::DType::F64;
    let (init, queries) = initial_state(&cfg, 6);
    let before = mean_loss(&init, &queries, &items, 1).unwrap();
    let out = train::<f64>(&cfg, &items, &[], |_| {}).unwrap();
    let after = mean_loss(&out.model, &out.queries, &items, 1).unwrap();
    assert!(after < before, "{after} >= {before}");
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.log[0].val_map, None);
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let items = corpus(6, 3, 2);
    let mut cfg = small_config();
    cfg.learning_rate = 0.0;
    cfg.epochs = 2;
    let (init, _) = initial_state(&cfg, 6);
    let out = train::<f64>(&cfg, &items, &[], |_| {}).unwrap();
    for (name, t) in init.params.iter() {
        let after = out.model.params.get(name).unwrap();
        assert!(
            t.data()
                .iter()
                .zip(after.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "{name} changed"
        );
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let items = corpus(9, 3, 3);
    let (tr, va) = items.split_at(6);
    let mut cfg = small_config();
    cfg.epochs = 2;
    let one = train::<f32>(&cfg, tr, va, |_| {}).unwrap();
    cfg.workers = 3;
    let three = train::<f32>(&cfg, tr, va, |_| {}).unwrap();
    assert_eq!(one.log, three.log);
    assert_eq!(one.model.params, three.model.params);
}

#[test]
fn learnable_queries_are_updated() {
    let items = corpus(6, 3, 4);
    let mut cfg = small_config();
    cfg.query.learnable = true;
    let out = train::<f64>(&cfg, &items, &[], |_| {}).unwrap();
    let frozen = QueryEmbeddingProvider::frozen(6, cfg.model.d_model, cfg.query.seed).unwrap();
    assert_ne!(out.queries.rows(), frozen.rows());
    assert!(out.queries.learnable);
}

#[test]
fn channel_or_node_mismatch_is_an_error() {
    let good = corpus(4, 3, 5);
    let wrong_channels = corpus(4, 2, 5);
    let cfg = small_config();
    assert!(matches!(
        train::<f64>(&cfg, &wrong_channels, &[], |_| {}),
        Err(HarnessError::Mismatch(_))
    ));
    assert!(matches!(
        train::<f64>(&cfg, &good, &wrong_channels, |_| {}),
        Err(HarnessError::Mismatch(_))
    ));
    let out = train::<f64>(&cfg, &good, &[], |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.save(dir.path(), &cfg).unwrap();
    assert!(matches!(
        evaluate_checkpoint(dir.path(), &wrong_channels, 1),
        Err(HarnessError::Mismatch(_))
    ));
    let fewer_nodes = gen_corpus(&CorpusConfig {
        items: 2,
        length: 96,
        num_nodes: 6,
        ..CorpusConfig::default()
    })
    .unwrap();
    assert!(matches!(
        evaluate_checkpoint(dir.path(), &fewer_nodes, 1),
        Err(HarnessError::Mismatch(_))
    ));
}

#[test]
fn evaluation_reads_the_checkpoint_without_modifying_it() {
    let items = corpus(8, 3, 6);
    let cfg = small_config();
    let out = train::<f32>(&cfg, &items[..6], &[], |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.save(dir.path(), &cfg).unwrap();
    let before = dir_bytes(dir.path());
    let a = evaluate_checkpoint(dir.path(), &items[6..], 1).unwrap();
    let b = evaluate_checkpoint(dir.path(), &items[6..], 2).unwrap();
    assert_eq!(dir_bytes(dir.path()), before);
    assert_eq!(a, b);
    let live = evaluate_model(&out.model, &out.queries, &items[6..], &cfg.eval, 1).unwrap();
    assert!(
        (live.average - a.average).abs() < 1e-3,
        "{} vs {}",
        live.average,
        a.average
    );
}

#[test]
fn ground_truth_scores_are_perfect_and_noise_is_not() {
    let items = corpus(40, 3, 7);
    let cfg = EvalConfig::default();
    let truth: Vec<Vec<f64>> = items.iter().map(SyntheticItem::labels_f64).collect();
    let report = evaluate_scores(&truth, &items, &cfg).unwrap();
    assert_eq!(report.average, 100.0);
    assert!(report.map.iter().all(|&m| m == 100.0));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise: Vec<Vec<f64>> = items
        .iter()
        .map(|it| (0..it.length()).map(|_| rand::Rng::random::<f64>(&mut rng)).collect())
        .collect();
    let chance = evaluate_scores(&noise, &items, &cfg).unwrap();
    assert!(chance.average < 25.0, "{}", chance.average);
}

#[test]
fn ablation_switches_nest_parameter_sets() {
    let full = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let full_model = TmMamba::<f64>::init(full.model.clone(), &mut rng).unwrap();
    for ab in [Ablation::NO_RELATIONAL, Ablation::UNIDIRECTIONAL] {
        let m = TmMamba::<f64>::init(full.clone().with_ablation(ab).model, &mut rng).unwrap();
        assert!(
            m.params.names().all(|n| full_model.params.contains(n)),
            "{}",
            ab.label()
        );
        assert!(m.params.len() < full_model.params.len());
    }
    let both = Ablation {
        relational: false,
        bidirectional: false,
        ..Ablation::FULL
    };
    let m = TmMamba::<f64>::init(full.with_ablation(both).model, &mut rng).unwrap();
    let uni = TmMamba::<f64>::init(small_config().with_ablation(Ablation::UNIDIRECTIONAL).model, &mut rng).unwrap();
    assert!(m.params.names().all(|n| uni.params.contains(n)));
}
