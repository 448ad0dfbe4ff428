mod common;

use common::checks;

#[test]
fn softmaxes_normalize() {
    checks::normalization().unwrap();
}

#[test]
fn scores_bounded_and_losses_finite() {
    checks::bounds().unwrap();
}

#[test]
fn sampler_batch_contract() {
    checks::sampling().unwrap();
}

#[test]
fn head_size_scaling() {
    checks::parameter_scaling().unwrap();
}
