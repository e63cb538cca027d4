use ssmg_harness::bench::{bench_memory, doubling_ratios, BenchConfig, BenchModel};

fn small() -> BenchConfig {
    BenchConfig {
        lengths: vec![64, 128, 256],
        d_model: 16,
        num_heads: 2,
        state_size: 4,
        ..BenchConfig::default()
    }
}

#[test]
fn scans_grow_linearly_and_attention_quadratically() {
    let rows = bench_memory(&small()).unwrap();
    assert_eq!(rows.len(), 9);
    for (_, r) in doubling_ratios(&rows, BenchModel::TmMamba) {
        assert!((1.8..=2.2).contains(&r), "tm_mamba {r}");
    }
    for (_, r) in doubling_ratios(&rows, BenchModel::RecurrentBaseline) {
        assert!((1.8..=2.2).contains(&r), "recurrent {r}");
    }
    let attn = doubling_ratios(&rows, BenchModel::AttentionBaseline);
    assert_eq!(attn.len(), 2);
    // the quadratic term takes over as L grows
    assert!(attn[1].1 > attn[0].1 && attn[1].1 > 2.5, "{attn:?}");
}

#[test]
fn cap_turns_into_out_of_memory_rows() {
    let mut cfg = small();
    let rows = bench_memory(&cfg).unwrap();
    let attn_peak = |l: usize| {
        rows.iter()
            .find(|r| r.model == BenchModel::AttentionBaseline && r.length == l)
            .and_then(|r| r.peak)
            .unwrap()
    };
    cfg.cap = attn_peak(128);
    let capped = bench_memory(&cfg).unwrap();
    let attn: Vec<_> = capped
        .iter()
        .filter(|r| r.model == BenchModel::AttentionBaseline)
        .map(|r| r.peak)
        .collect();
    assert_eq!(attn, vec![Some(attn_peak(64)), Some(attn_peak(128)), None]);
    assert!(doubling_ratios(&capped, BenchModel::AttentionBaseline).len() == 1);
}

#[test]
fn peaks_are_deterministic_and_lengths_validated() {
    assert_eq!(bench_memory(&small()).unwrap(), bench_memory(&small()).unwrap());
    for lengths in [vec![], vec![128, 64], vec![0, 64]] {
        let cfg = BenchConfig { lengths, ..small() };
        assert!(bench_memory(&cfg).is_err());
    }
}
