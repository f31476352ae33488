//! Pairwise topology function: a 3-layer MLP over concatenated feature pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Decoder, Encoder, Section};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `A′_ij = σ((m([x_i; x_j]) + m([x_j; x_i])) / 2)` for a ReLU MLP `m`
/// of shape `2F → h → h → 1`.
///
/// The first layer is stored as two `F×h` halves so that the pre-activation
/// of every pair is `x_i·W_top + x_j·W_bottom + b`, computed from two `N×h`
/// products instead of an `N²×2F` input.
#[derive(Clone, Debug, PartialEq)]
pub struct TopologyMlp<T> {
    params: Vec<Tensor<T>>,
}

const N_PARAMS: usize = 7;

impl<T: Scalar> TopologyMlp<T> {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn init(num_features: usize, hidden: usize, seed: u64) -> Result<Self> {
        if num_features == 0 || hidden == 0 {
            return Err(Error::Config("topology MLP needs positive input and hidden widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |rows: usize, cols: usize, fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            Tensor::uniform(rows, cols, -b, b, &mut rng)
        };
        let f2 = 2 * num_features;
        let params = vec![
            u(num_features, hidden, f2),
            u(num_features, hidden, f2),
            u(1, hidden, f2),
            u(hidden, hidden, hidden),
            u(1, hidden, hidden),
            u(hidden, 1, hidden),
            u(1, 1, hidden),
        ];
        Ok(Self { params })
    }

    pub fn from_params(params: Vec<Tensor<T>>) -> Result<Self> {
        if params.len() != N_PARAMS {
            return Err(Error::Contract(format!("topology MLP has {N_PARAMS} tensors, got {}", params.len())));
        }
        let (f, h) = (params[0].rows(), params[0].cols());
        let expected = [[f, h], [f, h], [1, h], [h, h], [1, h], [h, 1], [1, 1]];
        for (k, (p, e)) in params.iter().zip(expected).enumerate() {
            if p.shape() != e {
                return Err(Error::dim("topology", format!("parameter {k} has shape {:?}, expected {e:?}", p.shape())));
            }
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn num_features(&self) -> usize {
        self.params[0].rows()
    }

    pub fn hidden(&self) -> usize {
        self.params[0].cols()
    }

    pub fn on_tape(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Dense `N×N` affinity matrix, symmetric with entries in `(0, 1)`.
    pub fn adjacency_on(tape: &Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let u = tape.matmul(x, params[0])?;
        let v = tape.matmul(x, params[1])?;
        let h = tape.pair_hidden(u, v, params[2])?;
        let h = tape.dense(h, params[3], params[4], true)?;
        let out = tape.dense(h, params[5], params[6], false)?;
        let m = tape.reshape(out, n, n)?;
        let sym = tape.scale(tape.add(m, tape.transpose(m)?)?, T::lit(0.5))?;
        tape.sigmoid(sym)
    }

    pub fn adjacency(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let params = self.on_tape(&tape, false);
        let xv = tape.constant(x.clone());
        let a = Self::adjacency_on(&tape, &params, xv)?;
        Ok(tape.value(a))
    }
}

impl<T: Scalar> Section for TopologyMlp<T> {
    const TAG: [u8; 4] = *b"TOPO";

    fn encode(&self, enc: &mut Encoder) {
        for p in &self.params {
            enc.tensor(p);
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let params = (0..N_PARAMS).map(|_| dec.tensor()).collect::<Result<Vec<_>>>()?;
        Self::from_params(params).map_err(|e| dec.fail(e))
    }
}

/// `max(0, a − δ)` entrywise.
pub fn sparsify<T: Scalar>(a: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let d = T::lit(threshold);
    a.map(|v| (v - d).max(T::zero()))
}
