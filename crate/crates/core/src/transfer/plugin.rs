//! Low-rank residual on frozen condensed features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Decoder, Encoder, Section};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the left factor at initialization.
pub const INIT_STD: f64 = 0.02;

/// `ΔX′ = left · right` with `left` N′×r and `right` r×F.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankPlugin<T> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
}

/// Gaussian left factor, zero right factor: the residual starts at exactly zero.
pub fn init_plugin<T: Scalar>(num_nodes: usize, num_features: usize, rank: usize, seed: u64) -> Result<LowRankPlugin<T>> {
    if rank == 0 || rank > num_nodes.min(num_features) {
        return Err(Error::Config(format!(
            "plugin rank {rank} must lie in 1..={} for a {num_nodes}x{num_features} feature matrix",
            num_nodes.min(num_features)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(LowRankPlugin {
        left: Tensor::randn(num_nodes, rank, INIT_STD, &mut rng),
        right: Tensor::zeros(rank, num_features),
    })
}

impl<T: Scalar> LowRankPlugin<T> {
    pub fn rank(&self) -> usize {
        self.left.cols()
    }

    pub fn delta(&self) -> Result<Tensor<T>> {
        self.left.matmul(&self.right)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.left.clone(), self.right.clone()]
    }

    pub fn from_params(mut params: Vec<Tensor<T>>) -> Result<Self> {
        if params.len() != 2 {
            return Err(Error::Contract(format!("plugin has 2 factors, got {}", params.len())));
        }
        let right = params.pop().expect("two");
        let left = params.pop().expect("two");
        if left.cols() != right.rows() {
            return Err(Error::dim("plugin", format!("factors {:?} and {:?}", left.shape(), right.shape())));
        }
        Ok(Self { left, right })
    }
}

/// `X′ + 𝒜ℬ`. An all-zero right factor returns `X′` bit for bit.
pub fn apply_plugin<T: Scalar>(x: &Tensor<T>, plugin: &LowRankPlugin<T>) -> Result<Tensor<T>> {
    if plugin.left.rows() != x.rows() || plugin.right.cols() != x.cols() {
        return Err(Error::dim(
            "apply_plugin",
            format!("features {:?} with factors {:?}, {:?}", x.shape(), plugin.left.shape(), plugin.right.shape()),
        ));
    }
    if plugin.right.data().iter().all(|v| *v == T::zero()) {
        return Ok(x.clone());
    }
    x.add(&plugin.delta()?)
}

/// Tape version; `x` is normally a constant so only the factors get gradients.
pub fn apply_plugin_on<T: Scalar>(tape: &Tape<T>, x: Var, left: Var, right: Var) -> Result<Var> {
    tape.add(x, tape.matmul(left, right)?)
}

impl<T: Scalar> Section for LowRankPlugin<T> {
    const TAG: [u8; 4] = *b"LRPG";

    fn encode(&self, enc: &mut Encoder) {
        enc.tensor(&self.left);
        enc.tensor(&self.right);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let left = dec.tensor()?;
        let right = dec.tensor()?;
        Self::from_params(vec![left, right]).map_err(|e| dec.fail(e))
    }
}
