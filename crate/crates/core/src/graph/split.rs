use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AttributedGraph, Masks};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_SPLIT_ATTEMPTS: u64 = 100;

/// Fractions of nodes assigned to train/val/test, and the shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if !(self.train > 0.0 && self.test > 0.0 && self.val >= 0.0) || fr.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::Config(format!(
                "train and test fractions must be positive, validation non-negative, all summing to at most 1; got {fr:?}"
            )));
        }
        Ok(())
    }
}

fn count(frac: f64, n: usize) -> usize {
    // The epsilon keeps 0.7·100 at 70 despite binary rounding.
    (frac * n as f64 + 1e-9).floor() as usize
}

/// Uniform random node split. Reshuffles (up to 100 times) until every class
/// has at least one training node.
pub fn make_split<T: Scalar>(graph: &AttributedGraph<T>, spec: &SplitSpec) -> Result<AttributedGraph<T>> {
    spec.validate()?;
    let n = graph.num_nodes();
    let (n_train, n_val, n_test) = (count(spec.train, n), count(spec.val, n), count(spec.test, n));
    let mut order: Vec<usize> = (0..n).collect();
    for attempt in 0..MAX_SPLIT_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(attempt));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut masks = Masks::empty(n);
        for &i in &order[..n_train] {
            masks.train[i] = true;
        }
        for &i in &order[n_train..n_train + n_val] {
            masks.val[i] = true;
        }
        for &i in &order[n_train + n_val..n_train + n_val + n_test] {
            masks.test[i] = true;
        }
        let g = graph.clone().with_masks(masks)?;
        if g.check_train_coverage().is_ok() {
            let mut h = Sha256::new();
            h.update(graph.content_hash().as_bytes());
            h.update(serde_json::to_vec(spec)?);
            return Ok(g.with_lineage(hex::encode(h.finalize())));
        }
    }
    Err(Error::Graph(format!(
        "no split with every class in the training set after {MAX_SPLIT_ATTEMPTS} attempts"
    )))
}
