//! Backbone forward passes against direct computation, and training sanity.

mod common;

use common::{randn, rng};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use tcgu_core::gnn::{
    micro_f1, normalize_adjacency, train_gnn, train_gnn_observed, GnnKind, GnnModel, GnnSpec, Propagator, TrainConfig,
    TrainingView,
};
use tcgu_core::graph::{generate_sbm, make_split, FeatureModel, SbmSpec, SplitSpec};
use tcgu_core::{Graph, Tensor};

fn random_graph(seed: u64, n: usize, f: usize, c: usize) -> Graph {
    let mut r = rng(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if r.random_bool(0.3) {
                edges.push((u, v, r.random_range(0.5..2.0)));
            }
        }
    }
    let labels = (0..n).map(|i| i % c).collect();
    Graph::from_edges(randn(&mut r, n, f), labels, c, &edges).unwrap()
}

fn dense(p: &tcgu_core::CsrMatrix<f64>) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; p.n_cols()]; p.n_rows()];
    for (i, j, v) in p.triplets() {
        m[i][j] += v;
    }
    m
}

fn mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, r)| x * r[j]).sum()).collect()).collect()
}

#[test]
fn sgc_logits_equal_stepwise_propagation() {
    for s in 0..5 {
        let g = random_graph(s, 5, 3, 2);
        let spec = GnnSpec { hops: 3, ..GnnSpec::new(GnnKind::Sgc) };
        let model = GnnModel::<f64>::init(spec, 3, 2, s).unwrap();
        let logits = model.logits(&Propagator::from_graph(&g, 1.0).unwrap(), g.features()).unwrap();

        let p = dense(&normalize_adjacency(g.adjacency(), 1.0).unwrap());
        let mut h = common::rows(g.features());
        for _ in 0..3 {
            h = mul(&p, &h);
        }
        // Biases start at zero, so the logits are P³XW.
        let want = mul(&h, &common::rows(&model.params()[0]));
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((logits.get(i, j) - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn edgeless_gcn_is_a_per_node_mlp() {
    let mut r = rng(1);
    let x = randn(&mut r, 6, 4);
    let g = Graph::from_edges(x.clone(), vec![0, 1, 2, 0, 1, 2], 3, &[]).unwrap();
    let model = GnnModel::<f64>::init(GnnSpec { hidden: 5, ..GnnSpec::default() }, 4, 3, 1).unwrap();
    let logits = model.logits(&Propagator::from_graph(&g, 1.0).unwrap(), &x).unwrap();
    let w = model.params();
    let hidden: Vec<Vec<f64>> = mul(&common::rows(&x), &common::rows(&w[0])).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    let want = mul(&hidden, &common::rows(&w[2]));
    for i in 0..6 {
        for j in 0..3 {
            assert!((logits.get(i, j) - want[i][j]).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn relabeling_nodes_permutes_logits(seed in 0u64..500, sgc in any::<bool>()) {
        let (n, f, c) = (8, 3, 3);
        let g = random_graph(seed, n, f, c);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed + 1));
        // Node i of the original becomes node perm[i].
        let mut x = vec![0.0; n * f];
        let mut labels = vec![0; n];
        for i in 0..n {
            x[perm[i] * f..(perm[i] + 1) * f].copy_from_slice(g.features().row(i));
            labels[perm[i]] = g.labels()[i];
        }
        let edges: Vec<_> = g.edges().into_iter().filter(|&(u, v, _)| u < v).map(|(u, v, w)| (perm[u], perm[v], w)).collect();
        let h = Graph::from_edges(Tensor::new(n, f, x).unwrap(), labels, c, &edges).unwrap();

        let kind = if sgc { GnnKind::Sgc } else { GnnKind::Gcn };
        let model = GnnModel::<f64>::init(GnnSpec { hidden: 4, ..GnnSpec::new(kind) }, f, c, seed).unwrap();
        let a = model.logits(&Propagator::from_graph(&g, 1.0).unwrap(), g.features()).unwrap();
        let b = model.logits(&Propagator::from_graph(&h, 1.0).unwrap(), h.features()).unwrap();
        for i in 0..n {
            for j in 0..c {
                prop_assert!((a.get(i, j) - b.get(perm[i], j)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn output_widths() {
    let g = random_graph(2, 7, 5, 3);
    let prop = Propagator::from_graph(&g, 1.0).unwrap();
    for kind in [GnnKind::Gcn, GnnKind::Sgc] {
        let model = GnnModel::<f64>::init(GnnSpec { hidden: 11, ..GnnSpec::new(kind) }, 5, 3, 0).unwrap();
        assert_eq!(model.logits(&prop, g.features()).unwrap().shape(), [7, 3]);
        let z = model.embed(&prop, g.features()).unwrap();
        assert_eq!(z.shape(), [7, model.embedding_dim()]);
        if kind == GnnKind::Gcn {
            assert_eq!(model.embedding_dim(), 11);
        }
    }
}

fn separable() -> Graph {
    let mut spec = SbmSpec::balanced(2, 25, 0.3, 0.02, 8, 4);
    spec.features = FeatureModel::Gaussian { dim: 8, signal: 2.0, noise: 1.0 };
    let g: Graph = generate_sbm(&spec).unwrap();
    make_split(&g, &SplitSpec::default()).unwrap()
}

#[test]
fn separable_blocks_are_learned() {
    let g = separable();
    let view = TrainingView::from_graph(&g, 1.0).unwrap();
    for kind in [GnnKind::Gcn, GnnKind::Sgc] {
        let model = GnnModel::<f64>::init(GnnSpec::new(kind), 8, 2, 0).unwrap();
        let out = train_gnn(&model, &view, &TrainConfig::default()).unwrap();
        let logits = out.model.logits(&view.prop, &view.features).unwrap();
        let acc = micro_f1(&logits, g.labels(), &g.train_nodes()).unwrap();
        assert!(acc >= 0.95, "{kind}: train accuracy {acc}");
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let g = separable();
    let view = TrainingView::from_graph(&g, 1.0).unwrap();
    let model = GnnModel::<f64>::init(GnnSpec::default(), 8, 2, 3).unwrap();
    let config = TrainConfig { dropout: 0.3, seed: 5, ..TrainConfig::default() };
    let a = train_gnn(&model, &view, &config).unwrap();
    let b = train_gnn(&model, &view, &config).unwrap();
    assert_eq!(a.losses.last().unwrap().to_bits(), b.losses.last().unwrap().to_bits());
    assert!(a.model.params().iter().zip(b.model.params()).all(|(x, y)| x.bit_eq(&y)));
}

#[test]
fn sgc_loss_never_rises_across_ten_epochs() {
    let g = separable();
    let view = TrainingView::from_graph(&g, 1.0).unwrap();
    let model = GnnModel::<f64>::init(GnnSpec::new(GnnKind::Sgc), 8, 2, 0).unwrap();
    let mut losses = Vec::new();
    train_gnn_observed(&model, &view, &TrainConfig { epochs: 200, ..TrainConfig::default() }, |_, _, l| losses.push(l)).unwrap();
    for t in 0..losses.len() - 10 {
        assert!(losses[t + 10] <= losses[t], "epoch {t}: {} then {}", losses[t], losses[t + 10]);
    }
}
