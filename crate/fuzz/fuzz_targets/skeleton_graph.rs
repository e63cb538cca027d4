#![no_main]

use libfuzzer_sys::fuzz_target;
use ssmg_core::graph::{normalize_adjacency, SkeletonGraph};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(g) = SkeletonGraph::from_json(text) else { return };
    assert_eq!(SkeletonGraph::from_json(&g.to_json()).unwrap(), g);
    if g.num_nodes <= 64 {
        let a = normalize_adjacency::<f64>(&g.edges, g.num_nodes).unwrap();
        assert!(a.all_finite());
    }
});
