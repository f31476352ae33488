//! The feature-alignment bound on the class-wise gradient-matching objective
//! of a linear relay with squared loss.

mod common;

use common::bound::{alignment_bound, gradient_matching, instance, matmul, one_hot, transpose, violations};

#[test]
fn mean_term_is_the_class_mean_gap() {
    // (1/n) Hᵀ Y has the class mean in column c and zeros elsewhere.
    let h = vec![vec![1.0, 2.0], vec![3.0, 6.0]];
    let hy = matmul(&transpose(&h), &one_hot(2, 1, 3));
    assert_eq!(hy, vec![vec![0.0, 4.0, 0.0], vec![0.0, 8.0, 0.0]]);
}

#[test]
fn identical_classes_give_zero_on_both_sides() {
    let mut inst = instance(3);
    inst.cond = inst.real.clone();
    assert!(gradient_matching(&inst).abs() < 1e-20);
    assert!(alignment_bound(&inst).abs() < 1e-20);
}

#[test]
fn bound_holds_on_random_instances() {
    let bad = violations(200);
    assert!(bad.is_empty(), "{} of 200 draws violate the bound, e.g. {:?}", bad.len(), &bad[..bad.len().min(3)]);
}
