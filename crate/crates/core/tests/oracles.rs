//! Loss and statistics primitives against direct, loop-based oracles.

mod common;

use common::oracle;
use tcgu_core::condense::class_stats;
use tcgu_core::transfer::{cdr_loss, class_means, prototypes, sdm_loss, similarity_embedding};
use tcgu_core::Tensor;

fn within(gap: f64, what: &str) {
    assert!(gap <= oracle::TOL, "{what}: gap {gap:e}");
}

#[test]
fn class_statistics() {
    within(oracle::class_stats_gap(), "class_stats");
}

#[test]
fn feature_alignment_by_every_route() {
    within(oracle::feature_alignment_gap(), "feature alignment");
}

#[test]
fn class_prototypes() {
    within(oracle::prototypes_gap(), "prototypes");
}

#[test]
fn similarity_embeddings() {
    within(oracle::similarity_gap(), "similarity_embedding");
}

#[test]
fn similarity_distribution_matching() {
    within(oracle::sdm_gap(), "sdm_loss");
}

#[test]
fn contrastive_regularizer() {
    within(oracle::cdr_gap(), "cdr_loss");
}

#[test]
fn two_rows_give_mean_one_and_variance_two() {
    let h = Tensor::<f64>::from_f64(2, 1, &[0.0, 2.0]).unwrap();
    let stats = class_stats(&[h], &[0, 0], 1).unwrap();
    assert_eq!(stats.mean(0, 0).data(), &[1.0]);
    assert_eq!(stats.covariance(0, 0).data(), &[2.0]);
}

#[test]
fn prototype_examples() {
    let z = Tensor::<f64>::from_f64(2, 2, &[1.0, 1.0, 3.0, 3.0]).unwrap();
    assert_eq!(prototypes(&z, &[0, 0], 1).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(prototypes(&z, &[0, 1], 2).unwrap().data(), z.data());
    assert!(prototypes(&z, &[0, 0], 2).is_err(), "empty class must be rejected");
}

#[test]
fn similarity_examples() {
    let p = Tensor::<f64>::from_f64(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let z = Tensor::<f64>::from_f64(2, 2, &[2.0, 0.0, 0.0, 0.0]).unwrap();
    let sim = similarity_embedding(&z, &p, 1.0).unwrap();
    assert!((sim.get(0, 0) - std::f64::consts::E).abs() < 1e-15, "aligned row");
    assert_eq!(sim.get(0, 1), 1.0, "orthogonal row");
    assert_eq!(sim.row(1), &[1.0, 1.0], "zero-norm row");
}

#[test]
fn sdm_examples() {
    let a = Tensor::<f64>::from_f64(1, 2, &[1.0, 2.0]).unwrap();
    let b = Tensor::<f64>::from_f64(1, 2, &[1.0, 4.0]).unwrap();
    assert_eq!(sdm_loss(&a, &[0], &b, &[0], &[1.0]).unwrap(), 4.0);
    assert_eq!(sdm_loss(&a, &[0], &a, &[0], &[1.0]).unwrap(), 0.0);
    assert_eq!(class_means(&a, &[0], 1).unwrap()[0].data(), a.data());
}

#[test]
fn contrastive_regularizer_on_identical_embeddings() {
    // Every cosine is 1, so every ratio is 1/(N−1) and each node contributes
    // exactly that once its peers are averaged.
    let n = 7;
    let z = Tensor::<f64>::full(n, 3, 0.4);
    let y = [0, 0, 0, 1, 1, 2, 2];
    let nf = n as f64;
    assert!((cdr_loss(&z, &y, 0.5, false).unwrap() + nf / (nf - 1.0)).abs() < 1e-12);
    assert!((cdr_loss(&z, &y, 0.5, true).unwrap() - nf * (nf - 1.0).ln()).abs() < 1e-12);
}

#[test]
fn contrastive_regularizer_separated_classes_approach_minus_one_per_node() {
    let z = Tensor::<f64>::from_f64(4, 2, &[1.0, 0.0, 1.0, 0.01, 0.0, 1.0, 0.01, 1.0]).unwrap();
    let v = cdr_loss(&z, &[0, 0, 1, 1], 0.01, false).unwrap();
    assert!((v + 4.0).abs() < 1e-6, "{v}");
}
