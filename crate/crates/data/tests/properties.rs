mod support;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmg_data::annotation::{corpus_stats, merge_corpus, merge_overlapping, one_to_many, AnnotationItem, OverlapRule};
use ssmg_data::eval::{
    average_precision, iou, nms, scores_to_segments, ScoredSegment, Segment, IOU_THRESHOLDS, SCORE_THRESHOLDS,
};
use ssmg_data::synthetic::{annotation_mirror, gen_corpus, CorpusConfig, SyntheticItem};
use support::oracle::{random_items, to_eval};

fn covered(items: &[AnnotationItem]) -> BTreeSet<(String, usize)> {
    items
        .iter()
        .flat_map(|it| {
            it.segments
                .iter()
                .flat_map(move |s| (s.start()..s.end()).map(move |t| (it.sequence_id.clone(), t)))
        })
        .collect()
}

fn random_annotations(seed: u64) -> Vec<AnnotationItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texts = ["walk", "run", "jump", "sit down", "wave hands"];
    let mut out = Vec::new();
    for sid in 0..rng.random_range(1..4) {
        let len = rng.random_range(20..120);
        for _ in 0..rng.random_range(1..6) {
            let segs = (0..rng.random_range(1..4))
                .map(|_| {
                    let s = rng.random_range(0..len - 1);
                    Segment::new(s, rng.random_range(s + 1..=len)).unwrap()
                })
                .collect();
            let text = texts[rng.random_range(0..texts.len())];
            out.push(AnnotationItem::new(format!("seq{sid}"), text, segs, len).unwrap());
        }
    }
    out
}

proptest! {
    #[test]
    fn ap_is_monotone_in_threshold(seed in any::<u64>()) {
        let items = to_eval(&random_items(&mut ChaCha8Rng::seed_from_u64(seed), 30));
        let aps: Vec<f64> = IOU_THRESHOLDS
            .iter()
            .map(|&t| average_precision(&items, t).unwrap())
            .collect();
        prop_assert!(aps.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!(aps.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn ap_depends_only_on_rank(seed in any::<u64>(), power in 0.2f64..5.0) {
        let items = random_items(&mut ChaCha8Rng::seed_from_u64(seed), 30);
        let mut warped = items.clone();
        for it in &mut warped {
            for p in &mut it.preds {
                p.2 = p.2.powf(power) * 0.5 + 0.1;
            }
        }
        for t in IOU_THRESHOLDS {
            let a = average_precision(&to_eval(&items), t).unwrap();
            let b = average_precision(&to_eval(&warped), t).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_output_is_sorted_and_separated(
        raw in prop::collection::vec((0usize..40, 1usize..15, 0.01f64..0.99), 0..30),
        thr in 0.0f64..0.95,
    ) {
        let cands: Vec<ScoredSegment> = raw
            .iter()
            .map(|&(s, n, score)| ScoredSegment { segment: Segment::new(s, s + n).unwrap(), score })
            .collect();
        let kept = nms(&cands, thr);
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.segment, &b.segment) < thr);
            }
        }
        if !cands.is_empty() {
            prop_assert!(!kept.is_empty());
        }
    }

    #[test]
    fn threshold_runs_are_maximal(s in prop::collection::vec(0.0f64..1.0, 1..60)) {
        let mut pooled = Vec::new();
        for &theta in &SCORE_THRESHOLDS {
            let runs = scores_to_segments(&s, &[theta]).unwrap();
            for c in &runs {
                let (a, b) = (c.segment.start(), c.segment.end());
                prop_assert!(s[a..b].iter().all(|&x| x >= theta));
                prop_assert!(a == 0 || s[a - 1] < theta);
                prop_assert!(b == s.len() || s[b] < theta);
                let mean = s[a..b].iter().sum::<f64>() / (b - a) as f64;
                prop_assert!((c.score - mean).abs() < 1e-12);
            }
            let expected = (0..s.len())
                .filter(|&t| s[t] >= theta && (t == 0 || s[t - 1] < theta))
                .count();
            prop_assert_eq!(runs.len(), expected);
            pooled.extend(runs);
        }
        prop_assert_eq!(scores_to_segments(&s, &SCORE_THRESHOLDS).unwrap(), pooled);
    }

    #[test]
    fn merging_is_idempotent_and_keeps_coverage(seed in any::<u64>(), ratio in 0.3f64..=1.0) {
        let items = random_annotations(seed);
        for rule in [OverlapRule::Min, OverlapRule::Max] {
            let once = merge_corpus(&items, ratio, rule).unwrap();
            let twice = merge_corpus(&once, ratio, rule).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(covered(&items), covered(&once));
        }
    }

    #[test]
    fn merging_ignores_input_order(seed in any::<u64>()) {
        let items: Vec<_> = random_annotations(seed)
            .into_iter()
            .filter(|i| i.sequence_id == "seq0")
            .collect();
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        prop_assert_eq!(
            merge_overlapping(&items, 0.8, OverlapRule::Min).unwrap(),
            merge_overlapping(&shuffled, 0.8, OverlapRule::Min).unwrap()
        );
    }

    #[test]
    fn consolidation_has_unique_keys_and_disjoint_segments(seed in any::<u64>()) {
        let items = random_annotations(seed);
        let out = one_to_many(&items);
        let keys: BTreeSet<_> = out.iter().map(|i| (&i.sequence_id, &i.text)).collect();
        prop_assert_eq!(keys.len(), out.len());
        for it in &out {
            prop_assert!(it.segments.windows(2).all(|w| w[0].end() <= w[1].start()));
        }
        prop_assert_eq!(covered(&items), covered(&out));
        prop_assert_eq!(one_to_many(&out), out);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn corpus_jsonl_round_trips(seed in any::<u64>(), length in 64usize..200) {
        let cfg = CorpusConfig { items: 13, length, seed, ..CorpusConfig::default() };
        let corpus = gen_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        ssmg_data::jsonl::write(&path, &corpus).unwrap();
        let back: Vec<SyntheticItem> = ssmg_data::jsonl::read(&path).unwrap();
        prop_assert_eq!(back, corpus);
    }
}

#[test]
fn hundred_items_round_trip() {
    let corpus = gen_corpus(&CorpusConfig {
        items: 100,
        seed: 5,
        ..CorpusConfig::default()
    })
    .unwrap();
    let text = ssmg_data::jsonl::to_string(&corpus).unwrap();
    assert_eq!(ssmg_data::jsonl::parse::<SyntheticItem>(&text).unwrap(), corpus);
    assert!(ssmg_data::jsonl::parse::<SyntheticItem>("").unwrap().is_empty());
}

#[test]
fn synthetic_mirror_statistics() {
    let corpus = gen_corpus(&CorpusConfig {
        items: 600,
        ..CorpusConfig::default()
    })
    .unwrap();
    let stats = corpus_stats(&annotation_mirror(&corpus)).unwrap();
    assert!((1.0..=4.0).contains(&stats.segments_per_query.mean));
    assert!(stats.grounded_ratio.min > 0.0 && stats.grounded_ratio.max <= 1.0);
    assert_eq!(stats.num_sequences, 600);
}
