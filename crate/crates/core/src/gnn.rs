//! GCN and SGC backbones, full-batch supervised training, and Micro-F1.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Decoder, Encoder, Section};
use crate::error::{Error, Result};
use crate::graph::AttributedGraph;
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnKind {
    Gcn,
    Sgc,
}

impl std::str::FromStr for GnnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Self::Gcn),
            "sgc" => Ok(Self::Sgc),
            other => Err(Error::Config(format!("unknown GNN kind {other:?} (expected gcn or sgc)"))),
        }
    }
}

impl std::fmt::Display for GnnKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gcn => "gcn",
            Self::Sgc => "sgc",
        })
    }
}

/// Architecture of a backbone. `layers` applies to GCN, `hops` to SGC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnSpec {
    pub kind: GnnKind,
    pub layers: usize,
    pub hidden: usize,
    pub hops: usize,
    pub w_loop: f64,
}

impl Default for GnnSpec {
    fn default() -> Self {
        Self::new(GnnKind::Gcn)
    }
}

impl GnnSpec {
    pub fn new(kind: GnnKind) -> Self {
        Self {
            kind,
            layers: 2,
            hidden: 256,
            hops: 2,
            w_loop: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == GnnKind::Gcn && (self.layers == 0 || self.hidden == 0) {
            return Err(Error::Config("GCN needs at least one layer and a positive hidden width".into()));
        }
        if !(self.w_loop > 0.0) {
            return Err(Error::Config(format!("self-loop weight must be positive, got {}", self.w_loop)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub dropout: f64,
    /// Keep the parameters with the best validation accuracy when a
    /// validation set exists.
    pub select_on_val: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            weight_decay: 5e-4,
            optimizer: OptimizerKind::Adam,
            dropout: 0.0,
            select_on_val: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "training needs epochs > 0, lr > 0, weight decay >= 0 and dropout in [0,1): {self:?}"
            )));
        }
        Ok(())
    }
}

/// `P = (wI + D)^(-1/2) (wI + A) (wI + D)^(-1/2)` with `D` the degree matrix of `A`.
pub fn normalize_adjacency<T: Scalar>(a: &CsrMatrix<T>, w_loop: f64) -> Result<CsrMatrix<T>> {
    let w = T::lit(w_loop);
    let deg = a.row_sums();
    let inv_sqrt = deg
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let s = d + w;
            if s > T::zero() {
                Ok(T::one() / s.sqrt())
            } else {
                Err(Error::Domain {
                    op: "normalize_adjacency",
                    detail: format!("node {i} has zero degree and no self-loop weight"),
                })
            }
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(a.add_diagonal(w)?.scale_sym(&inv_sqrt, &inv_sqrt))
}

/// Dense, differentiable version of [`normalize_adjacency`].
pub fn normalize_dense_on_tape<T: Scalar>(tape: &Tape<T>, a: Var, w_loop: f64) -> Result<Var> {
    let n = tape.shape(a)[0];
    let eye = tape.constant(Tensor::identity(n).scale(T::lit(w_loop)));
    let tilde = tape.add(a, eye)?;
    let deg = tape.sum_cols(tilde)?;
    let s = tape.powf(deg, T::lit(-0.5))?;
    let outer = tape.matmul_ex(s, false, s, true)?;
    tape.mul(tilde, outer)
}

pub fn normalize_dense<T: Scalar>(a: &Tensor<T>, w_loop: f64) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let v = tape.constant(a.clone());
    let p = normalize_dense_on_tape(&tape, v, w_loop)?;
    Ok(tape.value(p))
}

/// A normalized propagation matrix, sparse for real graphs and dense for
/// condensed ones.
#[derive(Clone, Debug)]
pub enum Propagator<T> {
    Sparse(Arc<CsrMatrix<T>>),
    Dense(Tensor<T>),
}

/// A propagation matrix already placed on a tape (the dense form may carry gradients).
#[derive(Clone, Copy)]
pub enum PropVar<'a, T> {
    Sparse(&'a Arc<CsrMatrix<T>>),
    Dense(Var),
}

impl<T: Scalar> Propagator<T> {
    pub fn from_graph(graph: &AttributedGraph<T>, w_loop: f64) -> Result<Self> {
        Ok(Self::Sparse(Arc::new(normalize_adjacency(graph.adjacency(), w_loop)?)))
    }

    pub fn from_dense_adjacency(a: &Tensor<T>, w_loop: f64) -> Result<Self> {
        Ok(Self::Dense(normalize_dense(a, w_loop)?))
    }

    pub fn on_tape<'a>(&'a self, tape: &Tape<T>) -> PropVar<'a, T> {
        match self {
            Self::Sparse(p) => PropVar::Sparse(p),
            Self::Dense(p) => PropVar::Dense(tape.constant(p.clone())),
        }
    }

    pub fn num_nodes(&self) -> usize {
        match self {
            Self::Sparse(p) => p.n_rows(),
            Self::Dense(p) => p.rows(),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Self::Sparse(p) => p.matmul(x),
            Self::Dense(p) => p.matmul(x),
        }
    }
}

impl<T: Scalar> PropVar<'_, T> {
    pub fn apply(&self, tape: &Tape<T>, h: Var) -> Result<Var> {
        match self {
            Self::Sparse(p) => tape.spmm(p, h),
            Self::Dense(p) => tape.matmul(*p, h),
        }
    }
}

/// Everything full-batch training needs: propagation, features, labels and
/// the node sets to fit and to select on.
#[derive(Clone, Debug)]
pub struct TrainingView<T> {
    pub prop: Propagator<T>,
    pub features: Tensor<T>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> TrainingView<T> {
    pub fn from_graph(graph: &AttributedGraph<T>, w_loop: f64) -> Result<Self> {
        Ok(Self {
            prop: Propagator::from_graph(graph, w_loop)?,
            features: graph.features().clone(),
            labels: graph.labels().to_vec(),
            train: graph.train_nodes(),
            val: graph.val_nodes(),
            num_classes: graph.num_classes(),
        })
    }

    /// A small dense graph where every node is a training node.
    pub fn dense(adjacency: &Tensor<T>, features: Tensor<T>, labels: Vec<usize>, num_classes: usize, w_loop: f64) -> Result<Self> {
        let n = features.rows();
        Ok(Self {
            prop: Propagator::from_dense_adjacency(adjacency, w_loop)?,
            features,
            labels,
            train: (0..n).collect(),
            val: Vec::new(),
            num_classes,
        })
    }
}

/// Trained (or freshly initialized) backbone parameters.
///
/// GCN: `H ← relu(P·H·W_l + b_l)` for every hidden layer, logits `P·H·W_L + b_L`.
/// SGC: logits `P^K·X·W + b`.
///
/// The embedding is the input of the final linear map for GCN. SGC has no
/// hidden layer, so its embedding is the logits themselves, which keeps the
/// embedding a function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnModel<T> {
    spec: GnnSpec,
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

/// Node-wise outputs of one forward pass.
pub struct Forward {
    pub logits: Var,
    pub embedding: Var,
}

impl<T: Scalar> GnnModel<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: GnnSpec, in_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<usize> = match spec.kind {
            GnnKind::Gcn => std::iter::once(in_dim)
                .chain(std::iter::repeat_n(spec.hidden, spec.layers - 1))
                .chain(std::iter::once(num_classes))
                .collect(),
            GnnKind::Sgc => vec![in_dim, num_classes],
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            weights.push(Tensor::uniform(w[0], w[1], -bound, bound, &mut rng));
            biases.push(Tensor::zeros(1, w[1]));
        }
        Ok(Self { spec, weights, biases })
    }

    pub fn spec(&self) -> &GnnSpec {
        &self.spec
    }

    pub fn kind(&self) -> GnnKind {
        self.spec.kind
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.last().map_or(0, Tensor::cols)
    }

    pub fn embedding_dim(&self) -> usize {
        match self.spec.kind {
            GnnKind::Gcn if self.weights.len() > 1 => self.spec.hidden,
            GnnKind::Gcn => self.in_dim(),
            GnnKind::Sgc => self.num_classes(),
        }
    }

    /// Weights then biases, layer by layer.
    pub fn params(&self) -> Vec<Tensor<T>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w.clone(), b.clone()]).collect()
    }

    pub fn with_params(&self, params: Vec<Tensor<T>>) -> Result<Self> {
        if params.len() != 2 * self.weights.len() {
            return Err(Error::Contract(format!("{} parameter tensors for {} layers", params.len(), self.weights.len())));
        }
        let mut out = self.clone();
        for (l, pair) in params.chunks(2).enumerate() {
            pair[0].same_shape(&self.weights[l], "gnn weights")?;
            pair[1].same_shape(&self.biases[l], "gnn bias")?;
            out.weights[l] = pair[0].clone();
            out.biases[l] = pair[1].clone();
        }
        Ok(out)
    }

    pub fn params_on_tape(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| if trainable { tape.leaf(p) } else { tape.constant(p) })
            .collect()
    }

    /// Forward pass on a tape. `params` come from [`Self::params_on_tape`];
    /// `dropout` masks (one per hidden layer) are applied when given.
    pub fn forward_on(
        &self,
        tape: &Tape<T>,
        params: &[Var],
        prop: PropVar<'_, T>,
        x: Var,
        dropout: Option<&mut dyn FnMut(&Tape<T>, Var) -> Result<Var>>,
    ) -> Result<Forward> {
        if tape.shape(x)[1] != self.in_dim() {
            return Err(Error::dim("gnn", format!("features have width {}, model expects {}", tape.shape(x)[1], self.in_dim())));
        }
        let linear = |h: Var, l: usize| tape.matmul(h, params[2 * l]);
        match self.spec.kind {
            GnnKind::Gcn => {
                let last = self.weights.len() - 1;
                let mut h = x;
                let mut drop = dropout;
                for l in 0..last {
                    let z = prop.apply(tape, linear(h, l)?)?;
                    let z = tape.add_row(z, params[2 * l + 1])?;
                    h = tape.relu(z)?;
                    if let Some(d) = drop.as_mut() {
                        h = d(tape, h)?;
                    }
                }
                let z = prop.apply(tape, linear(h, last)?)?;
                let logits = tape.add_row(z, params[2 * last + 1])?;
                Ok(Forward { logits, embedding: h })
            }
            GnnKind::Sgc => {
                let mut h = x;
                for _ in 0..self.spec.hops {
                    h = prop.apply(tape, h)?;
                }
                let logits = tape.add_row(linear(h, 0)?, params[1])?;
                Ok(Forward { logits, embedding: logits })
            }
        }
    }

    fn run(&self, prop: &Propagator<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let params = self.params_on_tape(&tape, false);
        let xv = tape.constant(x.clone());
        let f = self.forward_on(&tape, &params, prop.on_tape(&tape), xv, None)?;
        Ok((tape.value(f.logits), tape.value(f.embedding)))
    }

    pub fn logits(&self, prop: &Propagator<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(prop, x)?.0)
    }

    pub fn embed(&self, prop: &Propagator<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(prop, x)?.1)
    }

    /// Features propagated once for GCN, `hops` times for SGC. From these,
    /// [`Self::embed_from_propagated`] computes embeddings of any row subset
    /// without touching the graph again (two-layer GCN or SGC only).
    pub fn propagate_inputs(&self, prop: &Propagator<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let times = match self.spec.kind {
            GnnKind::Gcn => 1,
            GnnKind::Sgc => self.spec.hops,
        };
        let mut h = x.clone();
        for _ in 0..times {
            h = prop.apply(&h)?;
        }
        Ok(h)
    }

    pub fn supports_row_embedding(&self) -> bool {
        self.spec.kind == GnnKind::Sgc || self.weights.len() == 2
    }

    pub fn embed_from_propagated(&self, propagated: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.supports_row_embedding() {
            return Err(Error::Contract("row-wise embedding needs a two-layer GCN or an SGC".into()));
        }
        let z = propagated.matmul(&self.weights[0])?;
        let b = self.biases[0].row(0);
        let cols = z.cols();
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let v = v + b[k % cols];
                match self.spec.kind {
                    GnnKind::Gcn => v.max(T::zero()),
                    GnnKind::Sgc => v,
                }
            })
            .collect();
        Tensor::new(z.rows(), cols, data)
    }
}

/// Result of [`train_gnn`].
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: GnnModel<T>,
    /// Training loss at each epoch, evaluated before that epoch's update.
    pub losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
}

/// Trains `model` in place of a copy by minimizing mean cross-entropy over
/// the view's training nodes.
pub fn train_gnn<T: Scalar>(model: &GnnModel<T>, view: &TrainingView<T>, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_gnn_observed(model, view, config, |_, _, _| {})
}

/// As [`train_gnn`], calling `observe(epoch, parameters_before_update, loss)` every epoch.
pub fn train_gnn_observed<T: Scalar>(
    model: &GnnModel<T>,
    view: &TrainingView<T>,
    config: &TrainConfig,
    mut observe: impl FnMut(usize, &GnnModel<T>, f64),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if view.train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if model.num_classes() != view.num_classes {
        return Err(Error::dim("train_gnn", format!("model has {} outputs for {} classes", model.num_classes(), view.num_classes)));
    }
    let train_labels: Vec<usize> = view.train.iter().map(|&i| view.labels[i]).collect();
    let mut opt = Optimizer::new(config.optimizer, config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut current = model.clone();
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut losses = Vec::with_capacity(config.epochs);
    let select = config.select_on_val && !view.val.is_empty();

    for epoch in 0..config.epochs {
        let tape = Tape::new();
        let params = current.params_on_tape(&tape, true);
        let x = tape.constant(view.features.clone());
        let p = config.dropout;
        let mut dropper = |t: &Tape<T>, h: Var| -> Result<Var> {
            let [r, c] = t.shape(h);
            let keep = T::lit(1.0 / (1.0 - p));
            let mask = (0..r * c).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
            let m = t.constant(Tensor::new(r, c, mask)?);
            t.mul(h, m)
        };
        let dropout: Option<&mut dyn FnMut(&Tape<T>, Var) -> Result<Var>> = if p > 0.0 { Some(&mut dropper) } else { None };
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
            other => other,
        };
        let fwd = current.forward_on(&tape, &params, view.prop.on_tape(&tape), x, dropout).map_err(diverged)?;
        let rows = tape.index_rows(fwd.logits, &view.train)?;
        let loss = tape.cross_entropy(rows, &train_labels).map_err(diverged)?;
        let lv = tape.scalar_value(loss)?.as_f64();
        if !lv.is_finite() {
            return Err(Error::Diverged { epoch, loss: lv });
        }
        losses.push(lv);
        observe(epoch, &current, lv);

        if select {
            let score = micro_f1(&tape.value(fwd.logits), &view.labels, &view.val)?;
            if score > best.2 {
                best = (current.clone(), epoch, score);
            }
        }

        let grads = tape.backward(loss)?;
        let values = current.params();
        let g: Vec<Tensor<T>> = params.iter().zip(&values).map(|(&v, t)| grads.get_or_zeros(v, t)).collect();
        current = current.with_params(opt.step(&values, &g)?)?;
        if current.params().iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged { epoch, loss: lv });
        }
    }

    if select {
        // The final parameters have not been scored yet.
        let logits = current.logits(&view.prop, &view.features)?;
        let score = micro_f1(&logits, &view.labels, &view.val)?;
        if score > best.2 {
            best = (current, config.epochs, score);
        }
        Ok(TrainOutcome {
            model: best.0,
            losses,
            best_epoch: best.1,
            best_val: Some(best.2),
        })
    } else {
        Ok(TrainOutcome {
            model: current,
            losses,
            best_epoch: config.epochs,
            best_val: None,
        })
    }
}

/// Micro-averaged F1 over the listed nodes. For single-label multi-class
/// prediction this equals accuracy.
pub fn micro_f1<T: Scalar>(logits: &Tensor<T>, labels: &[usize], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Eval("micro-F1 over an empty node set".into()));
    }
    let pred = logits.argmax_rows();
    let correct = nodes.iter().filter(|&&i| pred[i] == labels[i]).count();
    Ok(correct as f64 / nodes.len() as f64)
}

impl<T: Scalar> Section for GnnModel<T> {
    const TAG: [u8; 4] = *b"GNNM";

    fn encode(&self, enc: &mut Encoder) {
        enc.u8(match self.spec.kind {
            GnnKind::Gcn => 0,
            GnnKind::Sgc => 1,
        });
        enc.usize(self.spec.layers);
        enc.usize(self.spec.hidden);
        enc.usize(self.spec.hops);
        enc.f64(self.spec.w_loop);
        enc.usize(self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            enc.tensor(w);
            enc.tensor(b);
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let kind = match dec.u8()? {
            0 => GnnKind::Gcn,
            1 => GnnKind::Sgc,
            k => return Err(dec.fail(format!("unknown model kind tag {k}"))),
        };
        let spec = GnnSpec {
            kind,
            layers: dec.usize()?,
            hidden: dec.usize()?,
            hops: dec.usize()?,
            w_loop: dec.f64()?,
        };
        let count = dec.usize()?;
        let expected = match kind {
            GnnKind::Gcn => spec.layers,
            GnnKind::Sgc => 1,
        };
        if count != expected || count == 0 {
            return Err(dec.fail(format!("{count} layers stored for a {kind} model with {expected}")));
        }
        let mut weights = Vec::with_capacity(count);
        let mut biases = Vec::with_capacity(count);
        for _ in 0..count {
            weights.push(dec.tensor()?);
            biases.push(dec.tensor()?);
        }
        for l in 0..count {
            let chained = l == 0 || weights[l].rows() == weights[l - 1].cols();
            if !chained || biases[l].shape() != [1, weights[l].cols()] {
                return Err(dec.fail(format!("layer {l} has inconsistent shapes")));
            }
        }
        Ok(Self { spec, weights, biases })
    }
}
