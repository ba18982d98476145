mod common;

use affect_mtl::model::{Model, ModelConfig, AU_QUERIES, EXPR_QUERIES, N_QUERIES, VA_QUERIES};
use common::{architecture_check, masking_trial, randomize_params, small_config};

#[test]
fn query_layout_is_twelve_eight_two() {
    assert_eq!(N_QUERIES, 22);
    assert_eq!((AU_QUERIES, EXPR_QUERIES, VA_QUERIES), (0..12, 12..20, 20..22));
}

#[test]
fn full_size_model_at_initialization() {
    let model = Model::<f64>::new(ModelConfig::default(), 3).unwrap();
    architecture_check(&model, 3).unwrap();
}

#[test]
fn random_parameters_keep_invariants() {
    for seed in 0..4 {
        let mut model = Model::<f64>::new(small_config(), seed).unwrap();
        randomize_params(&mut model, seed, 3.0);
        architecture_check(&model, seed).unwrap();
    }
}

#[test]
fn invalid_labels_contribute_nothing() {
    for seed in 0..100 {
        let (before, after) = masking_trial(seed);
        assert_eq!(before.to_bits(), after.to_bits(), "seed {seed}: {before} vs {after}");
    }
}
