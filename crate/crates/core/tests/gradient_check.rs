mod common;

use common::finite_difference_check;
use megacrn::data::Normalizer;
use megacrn::model::{Init, Model, ModelConfig, Variant};
use megacrn::training::LossWeights;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        n_nodes: 3,
        in_channels: 1,
        hidden: 2,
        layers: 1,
        cheb_order: 1,
        embed_dim: 2,
        prototypes: 2,
        memory_dim: 2,
        horizon: 2,
        lookback: 2,
        variant,
        hyper_bias: true,
    }
}

fn run(variant: Variant, seed: u64) {
    let model = Model::new(tiny(variant), Init::Random(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Array4::from_shape_fn((2, 2, 3, 1), |_| rng.gen_range(-1.5..1.5));
    let targets = Array4::from_shape_fn((2, 2, 3, 1), |_| rng.gen_range(30.0..70.0));
    let norm = Normalizer { mean: 50.0, std: 8.0 };
    let weights = LossWeights {
        kappa1: 0.5,
        kappa2: 0.5,
        margin: 1.0,
        mask_zeros: true,
    };
    let report = finite_difference_check(&model, &inputs, &targets, &norm, weights, 1e-5);
    assert!(report.max_rel_err < 1e-4, "{variant}: {report:?}");
    assert!(report.skipped * 10 < report.checked, "{variant}: {report:?}");
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for variant in Variant::ALL {
        run(variant, 3);
    }
}
