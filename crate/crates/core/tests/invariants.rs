//! Structural invariants of condensation and transfer, and the zero-glance
//! contract: transfer never receives the deleted data.

mod common;

use common::{rng, scramble, stage1};
use proptest::prelude::*;
use tcgu_core::condense::{condense_observed, CondensedGraph};
use tcgu_core::gnn::{GnnKind, GnnModel, GnnSpec, TrainConfig, TrainingView};
use tcgu_core::graph::{apply_deletion, sample_deletion, DeletionKind};
use tcgu_core::pipeline::{unlearn, PipelineConfig, UnlearnRun};
use tcgu_core::transfer::{
    apply_plugin, init_plugin, sample_trajectory, transfer, transfer_observed, FunctionQueue, TransferConfig,
};
use tcgu_core::{Graph, Result, Tensor};

fn check_affinity(a: &Tensor<f64>, when: &str) {
    let n = a.rows();
    assert_eq!(a.cols(), n, "{when}: square");
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            assert!(v > 0.0 && v < 1.0, "{when}: entry ({i},{j}) = {v}");
            assert_eq!(v.to_bits(), a.get(j, i).to_bits(), "{when}: asymmetric at ({i},{j})");
        }
    }
}

#[test]
fn condensed_affinity_is_symmetric_and_open_unit_at_every_step() {
    let (graph, model, _, config) = stage1(1);
    let mut steps = 0;
    condense_observed(&graph, &model, &config.condense, |rec, a| {
        check_affinity(a, &format!("condensation step {}", rec.step));
        steps += 1;
    })
    .unwrap();
    assert_eq!(steps, config.condense.steps);
}

#[test]
fn transfer_starts_from_the_condensed_features_and_keeps_labels() {
    let (graph, model, condensed, config) = stage1(2);
    let req = sample_deletion(&graph, DeletionKind::Node, 0.2, 2).unwrap();
    let remaining = apply_deletion(&graph, &req).unwrap();
    let histogram = condensed.class_histogram();
    let mut first = true;
    let out = transfer_observed(&condensed, &remaining, model.spec(), &config.transfer, |p| {
        if first {
            assert!(p.features.bit_eq(condensed.features()), "residual must be zero before the first update");
            first = false;
        }
        check_affinity(p.adjacency, &format!("transfer step {}", p.record.step));
        assert!(p.record.queue_len <= config.transfer.queue_capacity);
        assert_eq!(p.labels, condensed.labels());
    })
    .unwrap();
    assert!(!first);
    assert_eq!(out.class_histogram(), histogram);
    assert_eq!(out.labels(), condensed.labels());
    assert!(!out.features().bit_eq(condensed.features()), "the residual should have moved");
}

#[test]
fn zero_right_factor_returns_the_features_bit_for_bit() {
    let mut r = rng(3);
    let x = Tensor::<f64>::randn(9, 5, 1.0, &mut r);
    let plugin = init_plugin::<f64>(9, 5, 2, 3).unwrap();
    assert!(apply_plugin(&x, &plugin).unwrap().bit_eq(&x));
}

#[test]
fn trajectory_of_fifty_epochs_gives_ten_snapshots() {
    let (_, _, condensed, _) = stage1(4);
    let view = condensed.training_view().unwrap();
    let mut queue = FunctionQueue::new(100).unwrap();
    let spec = GnnSpec::new(GnnKind::Sgc);
    let pushed = sample_trajectory(&view, &spec, 50, 10, &TrainConfig::default(), &mut queue, 0).unwrap();
    assert_eq!((pushed, queue.len()), (10, 10));
}

fn snapshot(view: &TrainingView<f64>, seed: u64) -> GnnModel<f64> {
    GnnModel::init(GnnSpec::new(GnnKind::Sgc), view.features.cols(), view.num_classes, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn queue_never_exceeds_capacity(capacity in 1usize..8, pushes in 0usize..30) {
        let (_, _, condensed, _) = stage1(5);
        let view = condensed.training_view().unwrap();
        let mut queue = FunctionQueue::new(capacity).unwrap();
        for s in 0..pushes {
            queue.push(snapshot(&view, s as u64));
            prop_assert!(queue.len() <= capacity);
        }
        prop_assert_eq!(queue.len(), pushes.min(capacity));
    }
}

// The transfer and unlearning entry points take the condensed graph, the
// remaining graph and configuration only; there is no slot for the deleted data.
type TransferFn = fn(&CondensedGraph<f64>, &Graph, &GnnSpec, &TransferConfig) -> Result<CondensedGraph<f64>>;
type UnlearnFn = fn(&GnnModel<f64>, &CondensedGraph<f64>, &Graph, &PipelineConfig) -> Result<UnlearnRun<f64>>;
const _: TransferFn = transfer::<f64>;
const _: UnlearnFn = unlearn::<f64>;

#[test]
fn transfer_output_ignores_the_deleted_data() {
    let (graph, model, condensed, config) = stage1(6);
    let req = sample_deletion(&graph, DeletionKind::Node, 0.2, 6).unwrap();
    let other = scramble(&graph, &req.nodes, 99);
    assert_ne!(graph.content_hash(), other.content_hash(), "the deleted data must actually differ");

    let (a, b) = (apply_deletion(&graph, &req).unwrap(), apply_deletion(&other, &req).unwrap());
    let run = |remaining: &Graph| transfer(&condensed, remaining, model.spec(), &config.transfer).unwrap();
    let (ta, tb) = (run(&a), run(&b));
    assert!(ta.features().bit_eq(tb.features()));
    assert!(ta.adjacency().bit_eq(tb.adjacency()));
    assert_eq!(ta.labels(), tb.labels());
}
