use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::AttributedGraph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How node features are drawn for a synthetic graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureModel {
    /// Class centroid `~ N(0, signal²)` plus isotropic `N(0, noise²)` noise.
    Gaussian { dim: usize, signal: f64, noise: f64 },
    /// Sparse binary bag of words. Each class owns a contiguous block of the
    /// vocabulary; a node switches on about `words` entries, each drawn from
    /// its class block with probability `topic_prob` and uniformly otherwise.
    BagOfWords { dim: usize, words: usize, topic_prob: f64 },
}

/// Stochastic block model with one block per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub features: FeatureModel,
    pub seed: u64,
}

impl SbmSpec {
    /// Balanced blocks with Gaussian features.
    pub fn balanced(classes: usize, per_class: usize, p_in: f64, p_out: f64, dim: usize, seed: u64) -> Self {
        Self {
            block_sizes: vec![per_class; classes],
            p_in,
            p_out,
            features: FeatureModel::Gaussian {
                dim,
                signal: 1.0,
                noise: 1.0,
            },
            seed,
        }
    }

    /// A citation-network-shaped surrogate: 2708 nodes in 7 unbalanced
    /// classes, 1433 binary features, about 5.4k edges with ~80% homophily.
    pub fn citation_like(seed: u64) -> Self {
        Self {
            block_sizes: vec![351, 217, 418, 818, 426, 298, 180],
            p_in: 0.0067,
            p_out: 0.00034,
            features: FeatureModel::BagOfWords {
                dim: 1433,
                words: 18,
                topic_prob: 0.16,
            },
            seed,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.block_sizes.is_empty() || self.block_sizes.contains(&0) {
            return Err(Error::Config("every block needs at least one node".into()));
        }
        if !prob(self.p_in) || !prob(self.p_out) {
            return Err(Error::Config("edge probabilities must lie in [0,1]".into()));
        }
        match self.features {
            FeatureModel::Gaussian { dim, signal, noise } if dim > 0 && signal >= 0.0 && noise >= 0.0 => Ok(()),
            FeatureModel::BagOfWords { dim, words, topic_prob }
                if dim >= self.block_sizes.len() && words > 0 && prob(topic_prob) =>
            {
                Ok(())
            }
            _ => Err(Error::Config("invalid feature model".into())),
        }
    }
}

/// Samples a graph from the block model. Labels are block ids; no split is set.
pub fn generate_sbm<T: Scalar>(spec: &SbmSpec) -> Result<AttributedGraph<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.block_sizes.len();
    let labels: Vec<usize> = spec
        .block_sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &s)| std::iter::repeat_n(k, s))
        .collect();
    let n = labels.len();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v, T::one()));
            }
        }
    }

    let features = match spec.features {
        FeatureModel::Gaussian { dim, signal, noise } => {
            let centroids: Tensor<f64> = Tensor::randn(c, dim, signal, &mut rng);
            let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
            let mut data = Vec::with_capacity(n * dim);
            for &y in &labels {
                data.extend(centroids.row(y).iter().map(|&m| T::lit(m + normal.sample(&mut rng))));
            }
            Tensor::new(n, dim, data)?
        }
        FeatureModel::BagOfWords { dim, words, topic_prob } => {
            let block = dim / c;
            let mut data = vec![T::zero(); n * dim];
            for (i, &y) in labels.iter().enumerate() {
                for _ in 0..words {
                    let w = if rng.random::<f64>() < topic_prob {
                        y * block + rng.random_range(0..block)
                    } else {
                        rng.random_range(0..dim)
                    };
                    data[i * dim + w] = T::one();
                }
            }
            Tensor::new(n, dim, data)?
        }
    };
    AttributedGraph::from_edges(features, labels, c, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labelled_by_block() {
        let spec = SbmSpec::balanced(3, 10, 0.5, 0.05, 4, 7);
        let a: AttributedGraph<f64> = generate_sbm(&spec).unwrap();
        let b: AttributedGraph<f64> = generate_sbm(&spec).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.class_histogram(&(0..30).collect::<Vec<_>>()), vec![10, 10, 10]);
    }

    #[test]
    fn homophilous_edges_dominate() {
        let g: AttributedGraph<f64> = generate_sbm(&SbmSpec::balanced(2, 40, 0.3, 0.01, 2, 1)).unwrap();
        let same = g.edges().iter().filter(|&&(u, v, _)| g.labels()[u] == g.labels()[v]).count();
        assert!(same * 2 > g.num_edges());
    }
}
