use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AttributedGraph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

/// Number of unordered cross-class pairs within a node set, from its class histogram.
fn cross_pairs(hist: &[usize]) -> usize {
    let total: usize = hist.iter().sum();
    let same: usize = hist.iter().map(|&h| h * h).sum();
    (total * total - same) / 2
}

/// Adds `⌊ratio·M⌋` new unit-weight edges between nodes of different classes,
/// each with at least one training endpoint. Returns the corrupted graph and
/// the injected edges as `(u, v)` with `u < v`.
pub fn inject_adversarial_edges<T: Scalar>(
    graph: &AttributedGraph<T>,
    ratio: f64,
    seed: u64,
) -> Result<(AttributedGraph<T>, Vec<(usize, usize)>)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("attack ratio must lie in (0,1], got {ratio}")));
    }
    let count = (ratio * graph.num_edges() as f64 + 1e-9).floor() as usize;
    if count == 0 {
        return Err(Error::Config(format!("attack ratio {ratio} injects no edges")));
    }
    let n = graph.num_nodes();
    let labels = graph.labels();
    let train = &graph.masks().train;
    let all: Vec<usize> = (0..n).collect();
    let outside: Vec<usize> = (0..n).filter(|&i| !train[i]).collect();
    let existing = graph
        .edges()
        .iter()
        .filter(|&&(u, v, _)| labels[u] != labels[v] && (train[u] || train[v]))
        .count();
    let feasible = cross_pairs(&graph.class_histogram(&all)) - cross_pairs(&graph.class_histogram(&outside)) - existing;
    if count > feasible {
        return Err(Error::Graph(format!(
            "{count} adversarial edges requested but only {feasible} cross-class non-edges touch the training set"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eligible = |u: usize, v: usize| u != v && labels[u] != labels[v] && (train[u] || train[v]) && !graph.has_edge(u, v);
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(count);
    if count * 4 > feasible {
        // Dense request: enumerate every candidate and sample without replacement.
        let mut cands = Vec::with_capacity(feasible);
        for u in 0..n {
            for v in u + 1..n {
                if eligible(u, v) {
                    cands.push((u, v));
                }
            }
        }
        chosen = sample(&mut rng, cands.len(), count).into_iter().map(|i| cands[i]).collect();
    } else {
        let train_nodes = graph.train_nodes();
        let mut seen = HashSet::with_capacity(count);
        while chosen.len() < count {
            let u = train_nodes[rng.random_range(0..train_nodes.len())];
            let v = rng.random_range(0..n);
            let pair = (u.min(v), u.max(v));
            if eligible(u, v) && seen.insert(pair) {
                chosen.push(pair);
            }
        }
    }
    chosen.sort_unstable();

    let mut trip: Vec<_> = graph.adjacency().triplets().collect();
    for &(u, v) in &chosen {
        trip.push((u, v, T::one()));
        trip.push((v, u, T::one()));
    }
    let corrupted = graph.replace_adjacency(CsrMatrix::from_triplets(n, n, trip)?);
    Ok((corrupted, chosen))
}
