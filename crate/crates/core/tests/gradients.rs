//! Analytic gradients against central finite differences.

mod common;

use catse::objectives::{loss_separation, loss_separation_node};
use catse::separator::Variant;
use catse::tensor::{Graph, Tensor};
use common::{model_error, op_error, operator_cases, random_signal, FD_TOLERANCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_operator() {
    for (name, inputs, op) in operator_cases() {
        let err = op_error(&inputs, op.as_ref());
        assert!(err < FD_TOLERANCE, "{name}: relative error {err:e}");
    }
}

#[test]
fn separation_loss_descends_under_a_small_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let reference = random_signal(64, &mut rng);
    let est: Vec<f64> = reference.iter().map(|r| r + rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let v = g.leaf(Tensor::from_vec(est.clone()), true);
    let l = loss_separation_node(&mut g, v, &reference).unwrap();
    let before = g.value(l).item().unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(v).unwrap().into_data();
    let stepped: Vec<f64> = est.iter().zip(&grad).map(|(e, d)| e - 1e-3 * d).collect();
    let after = loss_separation(&stepped, &reference).unwrap();
    assert!(after < before, "{after} >= {before}");
}

fn check_model(variant: Variant, lambda: f64) {
    let (err, peak) = model_error(variant, lambda);
    assert!(peak > 1e-6, "degenerate check: all gradients vanish");
    assert!(err < FD_TOLERANCE, "{variant} lambda {lambda}: relative error {err:e}");
}

#[test]
fn end_to_end_separation_loss() {
    check_model(Variant::Pctcn, 0.5);
    check_model(Variant::Ecatse, 0.5);
}

#[test]
fn end_to_end_combined_loss() {
    check_model(Variant::Icatse, 0.5);
    check_model(Variant::Icatse, 2.0);
}
