//! Graph invariants under splitting, deletion and persistence.

mod common;

use common::small_graph;
use proptest::prelude::*;
use tcgu_core::checkpoint::Checkpoint;
use tcgu_core::condense::{init_condensed, CondenseConfig, CondensedGraph};
use tcgu_core::graph::{
    apply_deletion, generate_sbm, load_graph, make_split, sample_deletion, save_graph, DeletionKind, GraphFormat, SbmSpec,
    SplitSpec,
};
use tcgu_core::Graph;

fn assert_well_formed(g: &Graph) {
    let n = g.num_nodes();
    let a = g.adjacency();
    assert!(a.is_symmetric());
    assert!(a.triplets().all(|(u, v, _)| u != v), "self-loop");
    let m = g.masks();
    for i in 0..n {
        assert!([m.train[i], m.val[i], m.test[i]].iter().filter(|&&b| b).count() <= 1, "node {i} in two masks");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn deletions_keep_graphs_well_formed(seed in 0u64..200, ratio in 0.05f64..0.6, kind in 0usize..3) {
        let g = small_graph(seed % 7);
        let kind = [DeletionKind::Node, DeletionKind::Edge, DeletionKind::Feature][kind];
        let req = sample_deletion(&g, kind, ratio, seed).unwrap();
        let r = apply_deletion(&g, &req).unwrap();
        assert_well_formed(&r);
        match kind {
            DeletionKind::Node => {
                prop_assert_eq!(r.num_nodes(), g.num_nodes() - req.nodes.len());
                // No surviving edge touches a deleted node.
                for (u, v, _) in r.edges() {
                    prop_assert!(!req.nodes.contains(&r.original_ids()[u]) && !req.nodes.contains(&r.original_ids()[v]));
                }
                let train = g.train_nodes();
                prop_assert!(req.nodes.iter().all(|i| train.contains(i)));
                prop_assert_eq!(req.nodes.len(), (ratio * train.len() as f64).floor() as usize);
            }
            _ => {
                let twice = apply_deletion(&r, &req).unwrap();
                prop_assert_eq!(twice.content_hash(), r.content_hash());
            }
        }
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let g = small_graph(1);
    for kind in [DeletionKind::Node, DeletionKind::Edge, DeletionKind::Feature] {
        assert_eq!(sample_deletion(&g, kind, 0.2, 4).unwrap(), sample_deletion(&g, kind, 0.2, 4).unwrap());
    }
}

#[test]
fn split_covers_every_class_or_fails() {
    // Ten nodes, seven classes: a 70% train split must hold every class.
    let labels: Vec<usize> = (0..10).map(|i| i % 7).collect();
    let x = tcgu_core::Tensor::zeros(10, 2);
    let g = Graph::from_edges(x, labels, 7, &[]).unwrap();
    for seed in 0..30 {
        match make_split(&g, &SplitSpec { seed, ..SplitSpec::default() }) {
            Ok(s) => {
                let hist = s.class_histogram(&s.train_nodes());
                assert!(hist.iter().all(|&c| c > 0), "seed {seed}: {hist:?}");
            }
            Err(e) => assert!(e.to_string().contains("class"), "{e}"),
        }
    }
}

#[test]
fn split_without_validation_is_allowed() {
    let g: Graph = generate_sbm(&SbmSpec::balanced(2, 50, 0.1, 0.01, 4, 0)).unwrap();
    let s = make_split(&g, &SplitSpec { train: 0.5, val: 0.0, test: 0.5, seed: 0 }).unwrap();
    assert_eq!((s.train_nodes().len(), s.val_nodes().len(), s.test_nodes().len()), (50, 0, 50));
}

#[test]
fn every_format_round_trips() {
    let g = small_graph(2);
    let dir = tempfile::tempdir().unwrap();
    for (name, format) in [("csv", GraphFormat::EdgeListCsv), ("g.json", GraphFormat::Json), ("g.tcgu", GraphFormat::Binary)] {
        let path = dir.path().join(name);
        save_graph(&g, &path, format).unwrap();
        let back: Graph = load_graph(&path, Some(format)).unwrap();
        assert_eq!(back.edges(), g.edges(), "{name}");
        assert_eq!(back.labels(), g.labels(), "{name}");
        // The CSV layout has no split; the other two keep it.
        if format != GraphFormat::EdgeListCsv {
            assert_eq!(back.masks(), g.masks(), "{name}");
        }
        for (a, b) in back.features().data().iter().zip(g.features().data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{name}: feature bits");
        }
        let detected: Graph = load_graph(&path, None).unwrap();
        assert_eq!(detected.content_hash(), back.content_hash());
    }
}

#[test]
fn truncated_checkpoint_is_a_structured_error() {
    let g = small_graph(3);
    let bytes = Checkpoint::new().with(&g).to_bytes();
    for cut in [3, 9, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, tcgu_core::Error::Checkpoint(_)), "cut {cut}: {err}");
    }
}

#[test]
fn condensed_size_is_persisted() {
    let g = small_graph(4);
    let config = CondenseConfig { ratio: 0.05, ..CondenseConfig::default() };
    let train = g.train_nodes().len();
    let want = ((0.05 * train as f64).round() as usize).max(g.num_classes());
    let c = init_condensed(&g, &config).unwrap();
    assert_eq!(c.num_nodes(), want);
    let back: CondensedGraph<f64> = Checkpoint::from_bytes(&Checkpoint::new().with(&c).to_bytes()).unwrap().get().unwrap();
    assert_eq!(back.num_nodes(), want);
    assert_eq!(back.class_histogram(), c.class_histogram());
}
