mod common;

use common::grad::{check_model, toy_config, toy_model_error, worst_op_error, TOLERANCE};
use earlyflow_core::model::{MdtConfig, MdtModel};
use earlyflow_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..10 {
        let (err, name) = worst_op_error(seed);
        assert!(
            err < TOLERANCE,
            "{name} seed {seed}: relative error {err:e}"
        );
    }
}

#[test]
fn full_model_matches_finite_differences() {
    for seed in 0..10 {
        let (err, name) = toy_model_error(seed);
        assert!(
            err < TOLERANCE,
            "seed {seed}: {name} relative error {err:e}"
        );
    }
}

#[test]
fn vanilla_model_matches_finite_differences() {
    let model = MdtModel::new(toy_config().vanilla(), 7).unwrap();
    let x = Tensor::uniform(&[5, 13], 2.0, &mut ChaCha8Rng::seed_from_u64(7));
    let (err, name) = check_model(&model, &x, 1, &[1.0, 1.0, 1.0]);
    assert!(err < TOLERANCE, "{name} relative error {err:e}");
}

#[test]
fn two_block_model_matches_finite_differences() {
    let cfg = MdtConfig {
        n_blocks: 2,
        d_in: 4,
        ..toy_config()
    };
    let model = MdtModel::new(cfg, 3).unwrap();
    let x = Tensor::uniform(&[6, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let (err, name) = check_model(&model, &x, 2, &[1.0, 1.0, 1.0]);
    assert!(err < TOLERANCE, "{name} relative error {err:e}");
}
