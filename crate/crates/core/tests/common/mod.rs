#![allow(dead_code)]

pub mod bound;
pub mod grad;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcgu_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::randn(rows, cols, 1.0, rng)
}

/// `n` labels over `classes` classes, each class present at least `min` times.
pub fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize, min: usize) -> Vec<usize> {
    assert!(n >= classes * min);
    let mut y: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, min)).collect();
    y.extend((y.len()..n).map(|_| rng.random_range(0..classes)));
    // Fisher–Yates so the guaranteed rows are not all at the front.
    for i in (1..y.len()).rev() {
        y.swap(i, rng.random_range(0..=i));
    }
    y
}

/// Plain nested-vector copy of a tensor.
pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn mean_of(rows: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for &i in idx {
        for (a, b) in m.iter_mut().zip(&rows[i]) {
            *a += b;
        }
    }
    m.iter().map(|v| v / idx.len() as f64).collect()
}

pub fn members(labels: &[usize], c: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i] == c).collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

use tcgu_core::condense::{condense, CondenseConfig, CondensedGraph};
use tcgu_core::gnn::{GnnKind, GnnModel, GnnSpec, TrainConfig};
use tcgu_core::graph::{generate_sbm, make_split, Masks, SbmSpec, SplitSpec};
use tcgu_core::pipeline::{train_original, PipelineConfig};
use tcgu_core::transfer::TransferConfig;
use tcgu_core::{AttributedGraph, Graph};

/// A three-block graph small enough for every stage to run in well under a second.
pub fn small_graph(seed: u64) -> Graph {
    let g: Graph = generate_sbm(&SbmSpec::balanced(3, 40, 0.12, 0.01, 12, seed)).unwrap();
    make_split(&g, &SplitSpec { seed, ..SplitSpec::default() }).unwrap()
}

/// Fast settings for every stage.
pub fn small_config() -> PipelineConfig {
    PipelineConfig {
        gnn: GnnSpec { hidden: 16, ..GnnSpec::new(GnnKind::Gcn) },
        train: TrainConfig { epochs: 60, ..TrainConfig::default() },
        condense: CondenseConfig { ratio: 0.2, steps: 12, hidden: 8, ..CondenseConfig::default() },
        transfer: TransferConfig {
            steps: 6,
            refresh_every: 3,
            trajectory_len: 10,
            trajectory_samples: 5,
            queue_capacity: 7,
            plugin_period: 2,
            topology_period: 1,
            trajectory_training: TrainConfig { epochs: 10, ..TrainConfig::default() },
            ..TransferConfig::default()
        },
    }
}

/// Graph, trained model and condensed graph for `seed`.
pub fn stage1(seed: u64) -> (Graph, GnnModel<f64>, CondensedGraph<f64>, PipelineConfig) {
    let graph = small_graph(seed);
    let config = small_config();
    let model = train_original(&graph, &config.gnn, &config.train).unwrap();
    let condensed = condense(&graph, &model, &config.condense).unwrap();
    (graph, model, condensed, config)
}

/// High-dimensional, weak-signal three-block graph on which a GCN trained
/// without weight decay memorizes its half of the nodes.
pub fn overfit_toy() -> (Graph, GnnModel<f64>) {
    use tcgu_core::graph::FeatureModel;
    let mut spec = SbmSpec::balanced(3, 40, 0.05, 0.02, 256, 3);
    spec.features = FeatureModel::Gaussian { dim: 256, signal: 0.3, noise: 1.0 };
    let g: Graph = generate_sbm(&spec).unwrap();
    let g = make_split(&g, &SplitSpec { train: 0.5, val: 0.0, test: 0.5, seed: 0 }).unwrap();
    let train = TrainConfig { epochs: 300, weight_decay: 0.0, select_on_val: false, ..TrainConfig::default() };
    let model = train_original(&g, &GnnSpec::default(), &train).unwrap();
    (g, model)
}

/// `graph` with the rows and incident edges of `nodes` replaced by noise.
pub fn scramble(graph: &Graph, nodes: &[usize], seed: u64) -> Graph {
    let mut r = rng(seed);
    let n = graph.num_nodes();
    let mut x = graph.features().to_vec();
    let f = graph.num_features();
    for &i in nodes {
        for v in &mut x[i * f..(i + 1) * f] {
            *v = r.random_range(-5.0..5.0);
        }
    }
    let deleted = |i: usize| nodes.contains(&i);
    let mut edges: Vec<(usize, usize, f64)> =
        graph.edges().into_iter().filter(|&(u, v, _)| u < v && !deleted(u) && !deleted(v)).collect();
    for &u in nodes {
        for _ in 0..4 {
            let v = r.random_range(0..n);
            if v != u && !edges.iter().any(|&(a, b, _)| (a, b) == (u.min(v), u.max(v))) {
                edges.push((u.min(v), u.max(v), 1.0));
            }
        }
    }
    let masks: Masks = graph.masks().clone();
    AttributedGraph::from_edges(Tensor::new(n, f, x).unwrap(), graph.labels().to_vec(), graph.num_classes(), &edges)
        .unwrap()
        .with_masks(masks)
        .unwrap()
}

