mod common;

use common::gradcheck::{self, batch_for, Check, TRIALS};
use nnkg_core::ops::{Family, Mode, Model, ModelConfig};
use nnkg_core::train::objective;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ok(check: Check) {
    let n = check.unwrap_or_else(|e| panic!("{e}"));
    assert!(n >= TRIALS);
}

#[test]
fn affine() {
    ok(gradcheck::affine());
}

#[test]
fn relu() {
    ok(gradcheck::relu());
}

#[test]
fn layer_norm() {
    ok(gradcheck::layer_norm());
}

#[test]
fn dropout_with_fixed_mask() {
    ok(gradcheck::dropout());
}

#[test]
fn softmax_sigmoid_logsigmoid() {
    ok(gradcheck::softmax_sigmoid_logsigmoid());
}

#[test]
fn conv1d() {
    ok(gradcheck::conv1d());
}

#[test]
fn maxpool1d() {
    ok(gradcheck::maxpool1d());
}

#[test]
fn loss_wrt_all_inputs() {
    ok(gradcheck::loss_wrt_all_inputs());
}

#[test]
fn objective_every_family() {
    for family in Family::ALL {
        ok(gradcheck::objective_for(family));
    }
}

#[test]
fn anchor_rows_receive_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (batch, entities, relations) = batch_for(Family::Mlp, &mut rng);
    let mut model = Model::<f64>::new(ModelConfig::new(Family::Mlp, 8), entities, relations, 1).unwrap();
    objective(&mut model, &batch, 2.0, Mode::Eval, &mut rng).unwrap();
    let anchor = batch.conjuncts[0].anchors()[0];
    let g = model.params().grad(model.entity_param()).row(anchor.index()).to_vec();
    assert!(g.iter().any(|v| *v != 0.0));
}
