//! Attributed graphs: adjacency, node features, labels, and split masks.

mod attack;
mod deletion;
pub mod io;
mod sbm;
mod split;

use std::collections::BTreeSet;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

pub use io::{detect_format, load_graph, save_graph, GraphFormat};
pub use attack::inject_adversarial_edges;
pub use deletion::{apply_deletion, sample_deletion, DeletionKind, DeletionRequest};
pub use sbm::{generate_sbm, FeatureModel, SbmSpec};
pub use split::{make_split, SplitSpec};

/// Which nodes belong to the train, validation and test sets.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(n: usize) -> Self {
        Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.train.len() != n || self.val.len() != n || self.test.len() != n {
            return Err(Error::Graph(format!("mask lengths do not match {n} nodes")));
        }
        for i in 0..n {
            if u8::from(self.train[i]) + u8::from(self.val[i]) + u8::from(self.test[i]) > 1 {
                return Err(Error::Graph(format!("node {i} is in more than one mask")));
            }
        }
        Ok(())
    }

    fn select(&self, keep: &[usize]) -> Self {
        Self {
            train: keep.iter().map(|&i| self.train[i]).collect(),
            val: keep.iter().map(|&i| self.val[i]).collect(),
            test: keep.iter().map(|&i| self.test[i]).collect(),
        }
    }
}

pub(crate) fn indices_of(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// An undirected attributed graph with node labels and a train/val/test split.
///
/// The adjacency is symmetric with an empty diagonal; self-loops are only
/// introduced inside propagation. `original_ids[i]` is the id node `i` had
/// in the graph this one was derived from by node deletions, and the
/// lineage fingerprint identifies the dataset and split it descends from.
#[derive(Clone, Debug)]
pub struct AttributedGraph<T> {
    adjacency: Arc<CsrMatrix<T>>,
    features: Tensor<T>,
    labels: Vec<usize>,
    num_classes: usize,
    masks: Masks,
    original_ids: Vec<usize>,
    lineage: String,
}

impl<T: Scalar> AttributedGraph<T> {
    /// Builds a graph from undirected weighted edges. Each pair may appear at
    /// most once in either orientation; self-loops are dropped.
    pub fn from_edges(
        features: Tensor<T>,
        labels: Vec<usize>,
        num_classes: usize,
        edges: &[(usize, usize, T)],
    ) -> Result<Self> {
        let n = features.rows();
        let mut trip = Vec::with_capacity(edges.len() * 2);
        let mut seen = BTreeSet::new();
        for &(u, v, w) in edges {
            if u >= n || v >= n {
                return Err(Error::Graph(format!("edge ({u},{v}) references a node outside 0..{n}")));
            }
            if u == v {
                continue;
            }
            if !(w >= T::zero()) || !w.is_finite() {
                return Err(Error::Graph(format!("edge ({u},{v}) has invalid weight {w}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::Graph(format!("duplicate edge ({u},{v})")));
            }
            if w > T::zero() {
                trip.push((u, v, w));
                trip.push((v, u, w));
            }
        }
        let adjacency = CsrMatrix::from_triplets(n, n, trip)?;
        Self::from_parts(adjacency, features, labels, num_classes, Masks::empty(n))
    }

    /// Assembles a graph from an adjacency that must already be symmetric
    /// with an empty diagonal.
    pub fn from_parts(
        adjacency: CsrMatrix<T>,
        features: Tensor<T>,
        labels: Vec<usize>,
        num_classes: usize,
        masks: Masks,
    ) -> Result<Self> {
        let n = features.rows();
        if adjacency.n_rows() != n || adjacency.n_cols() != n {
            return Err(Error::Graph(format!(
                "adjacency is {}x{} for {n} nodes",
                adjacency.n_rows(),
                adjacency.n_cols()
            )));
        }
        if labels.len() != n {
            return Err(Error::Graph(format!("{} labels for {n} nodes", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Graph(format!("label {bad} outside 0..{num_classes}")));
        }
        if !adjacency.is_symmetric() {
            return Err(Error::Graph("adjacency is not symmetric".into()));
        }
        if let Some((i, _, _)) = adjacency.triplets().find(|&(i, j, _)| i == j) {
            return Err(Error::Graph(format!("self-loop on node {i}")));
        }
        if adjacency.triplets().any(|(_, _, v)| v < T::zero() || !v.is_finite()) {
            return Err(Error::Graph("adjacency has negative or non-finite weights".into()));
        }
        if !features.is_finite() {
            return Err(Error::Graph("features contain non-finite values".into()));
        }
        masks.validate(n)?;
        let mut graph = Self {
            adjacency: Arc::new(adjacency),
            features,
            labels,
            num_classes,
            masks,
            original_ids: (0..n).collect(),
            lineage: String::new(),
        };
        graph.lineage = graph.content_hash();
        Ok(graph)
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn adjacency(&self) -> &Arc<CsrMatrix<T>> {
        &self.adjacency
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        indices_of(&self.masks.train)
    }

    pub fn val_nodes(&self) -> Vec<usize> {
        indices_of(&self.masks.val)
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        indices_of(&self.masks.test)
    }

    pub fn original_ids(&self) -> &[usize] {
        &self.original_ids
    }

    /// Fingerprint of the dataset and split this graph descends from.
    /// Preserved by deletions.
    pub fn lineage(&self) -> &str {
        &self.lineage
    }

    pub(crate) fn with_lineage(mut self, lineage: String) -> Self {
        self.lineage = lineage;
        self
    }

    pub fn with_masks(mut self, masks: Masks) -> Result<Self> {
        masks.validate(self.num_nodes())?;
        self.masks = masks;
        Ok(self)
    }

    /// Undirected edges `(u, v, w)` with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize, T)> {
        self.adjacency.triplets().filter(|&(u, v, _)| u < v).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency.get(u, v) != T::zero()
    }

    /// Label counts over the given nodes.
    pub fn class_histogram(&self, nodes: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in nodes {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// Ok when every class has at least one training node.
    pub fn check_train_coverage(&self) -> Result<()> {
        let hist = self.class_histogram(&self.train_nodes());
        match hist.iter().position(|&c| c == 0) {
            Some(c) => Err(Error::Graph(format!("class {c} has no training nodes"))),
            None => Ok(()),
        }
    }

    /// SHA-256 over structure, features and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_nodes() as u64).to_le_bytes());
        h.update((self.num_classes as u64).to_le_bytes());
        for (u, v, w) in self.adjacency.triplets() {
            h.update((u as u64).to_le_bytes());
            h.update((v as u64).to_le_bytes());
            h.update(w.as_f64().to_le_bytes());
        }
        h.update((self.num_features() as u64).to_le_bytes());
        for &x in self.features.data() {
            h.update(x.as_f64().to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Keeps the listed nodes (in order) and the edges among them.
    pub(crate) fn induced(&self, keep: &[usize]) -> Result<Self> {
        let mut new_id = vec![usize::MAX; self.num_nodes()];
        for (k, &i) in keep.iter().enumerate() {
            new_id[i] = k;
        }
        let trip = self
            .adjacency
            .triplets()
            .filter(|&(u, v, _)| new_id[u] != usize::MAX && new_id[v] != usize::MAX)
            .map(|(u, v, w)| (new_id[u], new_id[v], w))
            .collect();
        let adjacency = CsrMatrix::from_triplets(keep.len(), keep.len(), trip)?;
        Ok(Self {
            adjacency: Arc::new(adjacency),
            features: self.features.select_rows(keep)?,
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            masks: self.masks.select(keep),
            original_ids: keep.iter().map(|&i| self.original_ids[i]).collect(),
            lineage: self.lineage.clone(),
        })
    }

    pub(crate) fn replace_adjacency(&self, adjacency: CsrMatrix<T>) -> Self {
        Self {
            adjacency: Arc::new(adjacency),
            ..self.clone()
        }
    }

    pub(crate) fn replace_features(&self, features: Tensor<T>) -> Self {
        Self {
            features,
            ..self.clone()
        }
    }

    /// Restores the bookkeeping of a previously persisted graph.
    pub(crate) fn restore_provenance(mut self, original_ids: Vec<usize>, lineage: String) -> Result<Self> {
        if original_ids.len() != self.num_nodes() {
            return Err(Error::Checkpoint("original id map has the wrong length".into()));
        }
        self.original_ids = original_ids;
        self.lineage = lineage;
        Ok(self)
    }
}
