//! Reverse-mode gradients of every condensation and transfer loss against
//! central finite differences.

mod common;

use common::grad;

fn assert_small(cases: Vec<(String, f64)>) {
    assert!(!cases.is_empty());
    for (case, err) in cases {
        assert!(err <= grad::TOL, "{case}: relative error {err:e}");
    }
}

#[test]
fn feature_alignment_terms() {
    assert_small(grad::feature_alignment_terms());
}

#[test]
fn logits_alignment() {
    assert_small(grad::logits_alignment());
}

#[test]
fn similarity_matching() {
    assert_small(grad::similarity_matching());
}

#[test]
fn contrastive_regularizer_both_forms() {
    assert_small(grad::contrastive_regularizer_both_forms());
}

#[test]
fn full_transfer_objective_wrt_residual_and_topology() {
    assert_small(grad::full_transfer_objective_wrt_residual_and_topology());
}

#[test]
fn fused_pair_and_dense_ops() {
    assert_small(grad::fused_pair_and_dense_ops());
}

#[test]
fn condensation_objective_wrt_features_and_topology() {
    assert_small(grad::condensation_objective_wrt_features_and_topology());
}

#[test]
fn classification_loss_wrt_weights() {
    assert_small(grad::classification_loss_wrt_weights());
}
