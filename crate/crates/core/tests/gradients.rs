//! End-to-end losses against central finite differences.

mod common;

const INSTANCES: usize = 100;
const TOL: f64 = 1e-4;

#[test]
fn encoder_loss_gradient() {
    let w = common::encoder_loss_worst(INSTANCES, 1);
    assert!(w < TOL, "encoder loss worst relative error {w:e}");
}

#[test]
fn actor_loss_gradient() {
    let w = common::actor_loss_worst(INSTANCES, 2);
    assert!(w < TOL, "actor loss worst relative error {w:e}");
}

#[test]
fn critic_loss_gradient() {
    let w = common::critic_loss_worst(INSTANCES, 3);
    assert!(w < TOL, "critic loss worst relative error {w:e}");
}

