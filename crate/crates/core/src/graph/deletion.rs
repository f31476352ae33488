use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AttributedGraph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeletionKind {
    Node,
    Edge,
    Feature,
}

impl std::str::FromStr for DeletionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "node" => Ok(Self::Node),
            "edge" => Ok(Self::Edge),
            "feature" => Ok(Self::Feature),
            other => Err(Error::Config(format!("unknown deletion kind {other:?}"))),
        }
    }
}

/// Elements to forget. `nodes` is used by the node and feature kinds,
/// `edges` by the edge kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionRequest {
    pub kind: DeletionKind,
    #[serde(default)]
    pub nodes: Vec<usize>,
    #[serde(default)]
    pub edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DeletionRequest {
    pub fn len(&self) -> usize {
        match self.kind {
            DeletionKind::Edge => self.edges.len(),
            _ => self.nodes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples deletion targets from the training region.
///
/// Node and feature kinds draw `⌊ratio·|train|⌋` training nodes. The edge
/// kind draws `⌊ratio·M⌋` edges among those with a training endpoint.
pub fn sample_deletion<T: Scalar>(
    graph: &AttributedGraph<T>,
    kind: DeletionKind,
    ratio: f64,
    seed: u64,
) -> Result<DeletionRequest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("deletion ratio must lie in (0,1), got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut req = DeletionRequest {
        kind,
        nodes: Vec::new(),
        edges: Vec::new(),
        ratio,
        seed,
    };
    match kind {
        DeletionKind::Node | DeletionKind::Feature => {
            let train = graph.train_nodes();
            let k = (ratio * train.len() as f64 + 1e-9).floor() as usize;
            if k == 0 {
                return Err(Error::Config(format!(
                    "ratio {ratio} of {} training nodes selects nothing",
                    train.len()
                )));
            }
            let mut picked: Vec<usize> = sample(&mut rng, train.len(), k).into_iter().map(|i| train[i]).collect();
            picked.sort_unstable();
            req.nodes = picked;
        }
        DeletionKind::Edge => {
            let train = &graph.masks().train;
            let candidates: Vec<(usize, usize)> = graph
                .edges()
                .into_iter()
                .filter(|&(u, v, _)| train[u] || train[v])
                .map(|(u, v, _)| (u, v))
                .collect();
            let k = (ratio * graph.num_edges() as f64 + 1e-9).floor() as usize;
            if k == 0 {
                return Err(Error::Config(format!(
                    "ratio {ratio} of {} edges selects nothing",
                    graph.num_edges()
                )));
            }
            if k > candidates.len() {
                return Err(Error::Graph(format!(
                    "{k} edges requested but only {} edges touch the training set",
                    candidates.len()
                )));
            }
            let mut picked: Vec<_> = sample(&mut rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect();
            picked.sort_unstable();
            req.edges = picked;
        }
    }
    Ok(req)
}

/// Returns the remaining graph after removing the request's targets.
///
/// Node deletion drops the nodes with their incident edges and compacts ids
/// (see [`AttributedGraph::original_ids`]); edge deletion removes both
/// directions; feature deletion zeroes feature rows. The input is untouched.
pub fn apply_deletion<T: Scalar>(graph: &AttributedGraph<T>, request: &DeletionRequest) -> Result<AttributedGraph<T>> {
    let n = graph.num_nodes();
    let check = |i: usize| {
        if i < n {
            Ok(())
        } else {
            Err(Error::Graph(format!("deletion target {i} does not exist in a graph of {n} nodes")))
        }
    };
    match request.kind {
        DeletionKind::Node => {
            let gone: HashSet<usize> = request.nodes.iter().copied().collect();
            for &i in &gone {
                check(i)?;
            }
            let keep: Vec<usize> = (0..n).filter(|i| !gone.contains(i)).collect();
            graph.induced(&keep)
        }
        DeletionKind::Edge => {
            let mut gone = HashSet::new();
            for &(u, v) in &request.edges {
                check(u)?;
                check(v)?;
                gone.insert((u, v));
                gone.insert((v, u));
            }
            let trip = graph
                .adjacency()
                .triplets()
                .filter(|&(u, v, _)| !gone.contains(&(u, v)))
                .collect();
            Ok(graph.replace_adjacency(CsrMatrix::from_triplets(n, n, trip)?))
        }
        DeletionKind::Feature => {
            let f = graph.num_features();
            let mut data = graph.features().to_vec();
            for &i in &request.nodes {
                check(i)?;
                data[i * f..(i + 1) * f].fill(T::zero());
            }
            Ok(graph.replace_features(Tensor::new(n, f, data)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::triangle;
    use crate::graph::Masks;

    fn req(kind: DeletionKind, nodes: Vec<usize>, edges: Vec<(usize, usize)>) -> DeletionRequest {
        DeletionRequest { kind, nodes, edges, ratio: 0.0, seed: 0 }
    }

    #[test]
    fn node_deletion_on_triangle() {
        let g = triangle();
        let r = apply_deletion(&g, &req(DeletionKind::Node, vec![1], vec![])).unwrap();
        assert_eq!(r.num_nodes(), 2);
        assert_eq!(r.edges().iter().map(|&(u, v, _)| (u, v)).collect::<Vec<_>>(), vec![(0, 1)]);
        assert_eq!(r.original_ids(), &[0, 2]);
        assert_eq!(g.num_nodes(), 3);
    }

    #[test]
    fn edge_deletion_on_triangle() {
        let r = apply_deletion(&triangle(), &req(DeletionKind::Edge, vec![], vec![(0, 1)])).unwrap();
        assert_eq!(r.adjacency().nnz(), 4);
        assert!(!r.has_edge(1, 0));
    }

    #[test]
    fn feature_deletion_zeroes_row() {
        let g = triangle();
        let r = apply_deletion(&g, &req(DeletionKind::Feature, vec![0], vec![])).unwrap();
        assert_eq!(r.features().row(0), &[0.0, 0.0]);
        assert_eq!(r.adjacency(), g.adjacency());
    }

    #[test]
    fn dangling_target_is_an_error() {
        assert!(apply_deletion(&triangle(), &req(DeletionKind::Node, vec![7], vec![])).is_err());
    }

    #[test]
    fn edge_ratio_halves_four_train_edges() {
        let x = Tensor::<f64>::zeros(5, 1);
        let edges: Vec<_> = (1..5).map(|i| (0, i, 1.0)).collect();
        let mut masks = Masks::empty(5);
        masks.train = vec![true; 5];
        let g = AttributedGraph::from_edges(x, vec![0; 5], 1, &edges).unwrap().with_masks(masks).unwrap();
        let r = sample_deletion(&g, DeletionKind::Edge, 0.5, 3).unwrap();
        assert_eq!(r.edges.len(), 2);
        assert_eq!(r, sample_deletion(&g, DeletionKind::Edge, 0.5, 3).unwrap());
    }
}
