use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssmg_core::graph::SkeletonGraph;
use ssmg_core::model::{Ablation, ModelConfig, TmMamba};
use ssmg_core::Tensor;

fn config(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        num_blocks: 1,
        state_size: 4,
        max_len: 12,
        graph: SkeletonGraph::tree(4).unwrap(),
        ablation,
        ..ModelConfig::default()
    }
}

#[test]
fn every_parameter_gradient_matches_central_differences() {
    for ablation in [Ablation::FULL, Ablation::NO_TEXT_CONTROL] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = TmMamba::<f64>::init(config(ablation), &mut rng).unwrap();
        let motion = Tensor::randn([4, 12, 3], 1.0, &mut rng).unwrap();
        let q = Tensor::<f64>::randn([8], 0.35, &mut rng).unwrap().into_data();
        let labels: Vec<f64> = (0..12).map(|t| f64::from(u8::from((3..8).contains(&t)))).collect();
        let report = model.grad_check(&motion, &q, &labels, 1e-3).unwrap();
        let names: Vec<&str> = model.params.names().collect();
        assert!(
            report.max_rel_err < 1e-4,
            "{}: {} at {}[{}]",
            ablation.label(),
            report.max_rel_err,
            names[report.worst.0],
            report.worst.1
        );
    }
}
