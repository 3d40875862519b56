mod common;

use common::{max_abs_diff, oracle_forward};
use megacrn::model::{Init, Model, ModelConfig, Variant};
use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant, layers: usize, order: usize) -> ModelConfig {
    ModelConfig {
        n_nodes: 3,
        in_channels: 1,
        hidden: 2,
        layers,
        cheb_order: order,
        embed_dim: 2,
        prototypes: 2,
        memory_dim: 2,
        horizon: 2,
        lookback: 2,
        variant,
        hyper_bias: true,
    }
}

fn check(cfg: ModelConfig, seed: u64) {
    let model = Model::new(cfg.clone(), Init::Random(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x = Array3::from_shape_fn((cfg.lookback, cfg.n_nodes, 1), |_| rng.gen_range(-2.0..2.0));
    let trace = model.forward(x.view()).unwrap();
    let oracle = oracle_forward(&model, &x);
    for (step, p) in oracle.predictions.iter().enumerate() {
        let got = trace.predictions.slice(s![step, .., ..]).to_owned();
        assert!(max_abs_diff(p, &got) < 1e-10, "{} step {step}", cfg.variant);
    }
    assert!(max_abs_diff(&oracle.encoder_graph, trace.encoder_graph.matrix()) < 1e-12);
    assert!(max_abs_diff(&oracle.decoder_graph, trace.decoder_graph.matrix()) < 1e-12);
    match (&oracle.attention, &trace.readout) {
        (Some(a), Some(r)) => assert!(max_abs_diff(a, &r.attention) < 1e-12),
        (None, None) => {}
        _ => panic!("attention presence differs for {}", cfg.variant),
    }
}

#[test]
fn every_variant_matches_unrolled_oracle() {
    for variant in Variant::ALL {
        for seed in 0..3 {
            check(tiny(variant, 1, 1), seed);
        }
    }
}

#[test]
fn deeper_and_higher_order_models_match_oracle() {
    for variant in Variant::ALL {
        check(tiny(variant, 2, 2), 7);
        check(
            ModelConfig {
                n_nodes: 5,
                hidden: 3,
                memory_dim: 4,
                prototypes: 3,
                embed_dim: 3,
                lookback: 4,
                horizon: 3,
                ..tiny(variant, 1, 3)
            },
            11,
        );
    }
}

#[test]
fn hyper_network_without_bias_matches_oracle() {
    let cfg = ModelConfig {
        hyper_bias: false,
        ..tiny(Variant::Mega, 1, 1)
    };
    check(cfg, 5);
}
