//! Stage 2: adapt a condensed graph to the remaining graph without seeing
//! the deleted data.
//!
//! The condensed features are frozen and receive a low-rank residual; the
//! residual and the topology function are fitted so that, under embedding
//! functions sampled from training trajectories on the condensed graph,
//! class-wise similarity distributions and multi-hop feature statistics
//! match the remaining graph, while a contrastive term keeps condensed
//! classes apart.

mod losses;
mod plugin;
mod queue;

pub use losses::{
    cdr_loss, cdr_loss_on, class_means, prototypes, prototypes_on, sdm_loss, sdm_loss_on, similarity_embedding,
    similarity_embedding_on,
};
pub use plugin::{apply_plugin, apply_plugin_on, init_plugin, LowRankPlugin, INIT_STD};
pub use queue::{sample_trajectory, snapshot_stride, FunctionQueue};

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::condense::{
    feature_alignment_on, graph_class_stats, phase_at, propagate_on, CondensedGraph, CovarianceMode, CovarianceRoute,
    FeatureTarget, Phase, TopologyMlp,
};
use crate::error::{Error, Result};
use crate::gnn::{normalize_dense_on_tape, GnnModel, GnnSpec, PropVar, Propagator, TrainConfig};
use crate::graph::AttributedGraph;
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Rank of the feature residual.
    pub rank: usize,
    pub steps: usize,
    /// The function queue is refilled every this many steps.
    pub refresh_every: usize,
    /// Epochs per sampled training trajectory.
    pub trajectory_len: usize,
    /// Snapshots taken from each trajectory.
    pub trajectory_samples: usize,
    pub queue_capacity: usize,
    pub lambda_feat: f64,
    pub lambda_cdr: f64,
    /// Covariance weight inside the feature loss.
    pub lambda_cov: f64,
    pub sim_temperature: f64,
    pub cdr_temperature: f64,
    /// Use log-ratios in the contrastive term instead of plain ratios.
    pub log_form: bool,
    pub plugin_period: usize,
    pub topology_period: usize,
    pub lr_plugin: f64,
    pub lr_topology: f64,
    pub optimizer: OptimizerKind,
    pub covariance: CovarianceMode,
    pub covariance_route: CovarianceRoute,
    /// Optimizer settings for the trajectory models; epochs and seed are overridden.
    pub trajectory_training: TrainConfig,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            steps: 20,
            refresh_every: 5,
            trajectory_len: 50,
            trajectory_samples: 10,
            queue_capacity: 20,
            lambda_feat: 100.0,
            lambda_cdr: 2e-3,
            lambda_cov: 0.01,
            sim_temperature: 0.5,
            cdr_temperature: 0.5,
            log_form: false,
            plugin_period: 4,
            topology_period: 1,
            lr_plugin: 0.01,
            lr_topology: 0.001,
            optimizer: OptimizerKind::Adam,
            covariance: CovarianceMode::Full,
            covariance_route: CovarianceRoute::Auto,
            trajectory_training: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("transfer needs at least one step".into());
        }
        if self.rank == 0 {
            return bad("plugin rank must be positive".into());
        }
        if self.refresh_every == 0 || self.queue_capacity == 0 {
            return bad("refresh interval and queue capacity must be positive".into());
        }
        if self.trajectory_samples == 0 || self.trajectory_samples > self.trajectory_len {
            return bad(format!(
                "trajectory samples ({}) must lie in 1..={} (trajectory length)",
                self.trajectory_samples, self.trajectory_len
            ));
        }
        if !(self.sim_temperature > 0.0 && self.cdr_temperature > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(self.lambda_feat >= 0.0 && self.lambda_cdr >= 0.0 && self.lambda_cov >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.plugin_period + self.topology_period == 0 {
            return bad("alternation periods cannot both be zero".into());
        }
        if !(self.lr_plugin > 0.0 && self.lr_topology > 0.0) {
            return bad("learning rates must be positive".into());
        }
        self.trajectory_training.validate()
    }
}

/// Losses at one transfer step, evaluated before its update.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub sdm: f64,
    pub feature: f64,
    pub cdr: f64,
    pub queue_len: usize,
}

/// What an observer sees at each step.
pub struct TransferProbe<'a, T> {
    pub record: &'a TransferRecord,
    /// Effective condensed features used in this step.
    pub features: &'a Tensor<T>,
    /// Pre-sparsification adjacency used in this step.
    pub adjacency: &'a Tensor<T>,
    pub labels: &'a [usize],
}

/// Fixed inputs of the transfer objective under one sampled embedding function.
pub struct TransferObjective<'a, T> {
    pub model: &'a GnnModel<T>,
    /// Per-class mean similarity vectors of the remaining graph under `model`.
    pub similarity_target: &'a [Tensor<T>],
    pub feature_target: &'a FeatureTarget<T>,
    pub labels: &'a [usize],
    /// Class shares of the remaining graph's training nodes.
    pub ratios: &'a [f64],
    pub hops: usize,
    pub w_loop: f64,
    pub config: &'a TransferConfig,
}

/// The transfer objective's terms as tape variables.
pub struct TransferTerms {
    pub total: Var,
    pub sdm: Var,
    /// Feature-alignment loss before weighting.
    pub feature: Var,
    /// Contrastive regularizer before weighting.
    pub cdr: Var,
    /// Effective condensed features `X' + left·right`.
    pub features: Var,
    /// Pre-sparsification adjacency.
    pub adjacency: Var,
}

/// `sdm + λ_feat·feature + λ_cdr·cdr` for base features `x`, residual
/// factors `left`, `right` and topology parameters `phi`.
pub fn transfer_loss_on<T: Scalar>(
    tape: &Tape<T>,
    objective: &TransferObjective<'_, T>,
    x: Var,
    left: Var,
    right: Var,
    phi: &[Var],
) -> Result<TransferTerms> {
    let c = objective.feature_target.num_classes();
    let cfg = objective.config;
    let xu = apply_plugin_on(tape, x, left, right)?;
    let adjacency = TopologyMlp::adjacency_on(tape, phi, xu)?;
    let p = normalize_dense_on_tape(tape, adjacency, objective.w_loop)?;
    let model = objective.model;
    let params = model.params_on_tape(tape, false);
    let z = model.forward_on(tape, &params, PropVar::Dense(p), xu, None)?.embedding;
    let protos = prototypes_on(tape, z, objective.labels, c)?;
    let s = similarity_embedding_on(tape, z, protos, cfg.sim_temperature)?;
    let sdm = sdm_loss_on(tape, objective.similarity_target, s, objective.labels, objective.ratios)?;
    let h = propagate_on(tape, PropVar::Dense(p), xu, objective.hops)?;
    let feature = feature_alignment_on(tape, objective.feature_target, &h, objective.labels, cfg.lambda_cov)?.total;
    let cdr = cdr_loss_on(tape, z, objective.labels, cfg.cdr_temperature, cfg.log_form)?;
    let total = tape.add(
        sdm,
        tape.add(tape.scale(feature, T::lit(cfg.lambda_feat))?, tape.scale(cdr, T::lit(cfg.lambda_cdr))?)?,
    )?;
    Ok(TransferTerms { total, sdm, feature, cdr, features: xu, adjacency })
}

/// Fits a fresh low-rank residual and the topology function of `condensed`
/// to `remaining`. The deleted data is not an input.
pub fn transfer<T: Scalar>(
    condensed: &CondensedGraph<T>,
    remaining: &AttributedGraph<T>,
    spec: &GnnSpec,
    config: &TransferConfig,
) -> Result<CondensedGraph<T>> {
    transfer_observed(condensed, remaining, spec, config, |_| {})
}

/// Fixed real-graph side of the similarity loss under one embedding function.
fn similarity_target<T: Scalar>(
    model: &GnnModel<T>,
    rows: &RealRows<T>,
    num_classes: usize,
    temperature: f64,
) -> Result<Vec<Tensor<T>>> {
    let z = if model.supports_row_embedding() {
        model.embed_from_propagated(&rows.propagated)?
    } else {
        model.embed(&rows.prop, &rows.features)?.select_rows(&rows.nodes)?
    };
    let p = prototypes(&z, &rows.labels, num_classes)?;
    let s = similarity_embedding(&z, &p, temperature)?;
    class_means(&s, &rows.labels, num_classes)
}

/// Training rows of the remaining graph, with inputs pre-propagated for
/// fast per-model embedding.
struct RealRows<T> {
    prop: Propagator<T>,
    features: Tensor<T>,
    nodes: Vec<usize>,
    labels: Vec<usize>,
    propagated: Tensor<T>,
}

/// As [`transfer`], calling `observe` at every step.
pub fn transfer_observed<T: Scalar>(
    condensed: &CondensedGraph<T>,
    remaining: &AttributedGraph<T>,
    spec: &GnnSpec,
    config: &TransferConfig,
    mut observe: impl FnMut(&TransferProbe<'_, T>),
) -> Result<CondensedGraph<T>> {
    config.validate()?;
    spec.validate()?;
    let c = condensed.num_classes();
    if remaining.num_classes() != c || remaining.num_features() != condensed.num_features() {
        return Err(Error::dim(
            "transfer",
            format!(
                "condensed graph has {c} classes and {} features, remaining graph {} and {}",
                condensed.num_features(),
                remaining.num_classes(),
                remaining.num_features()
            ),
        ));
    }
    remaining
        .check_train_coverage()
        .map_err(|e| Error::Contract(format!("remaining graph cannot be matched class by class: {e}")))?;

    let w_loop = condensed.w_loop();
    let stats = graph_class_stats(remaining, condensed.hops(), w_loop)?;
    let target = FeatureTarget::new(&stats, config.covariance, config.covariance_route)?;
    let ratios = stats.ratios().to_vec();

    let nodes = remaining.train_nodes();
    let prop = Propagator::from_graph(remaining, w_loop)?;
    let probe_model = GnnModel::init(spec.clone(), remaining.num_features(), c, 0)?;
    let propagated = probe_model.propagate_inputs(&prop, remaining.features())?.select_rows(&nodes)?;
    let real = RealRows {
        labels: nodes.iter().map(|&i| remaining.labels()[i]).collect(),
        features: remaining.features().clone(),
        prop,
        nodes,
        propagated,
    };

    // A residual from an earlier transfer becomes part of the frozen base.
    let start = condensed.consolidated()?;
    let base = start.base_features().clone();
    let labels = start.labels().to_vec();
    let n = start.num_nodes();
    let mut plugin = init_plugin::<T>(n, start.num_features(), config.rank, config.seed)?;
    let mut phi = start.topology().params().to_vec();
    let mut opt_plugin = Optimizer::new(config.optimizer, config.lr_plugin, 0.0);
    let mut opt_phi = Optimizer::new(config.optimizer, config.lr_topology, 0.0);
    let mut queue = FunctionQueue::new(config.queue_capacity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7f4a_7c15);
    // Keyed by address; each entry holds its model so the address cannot be
    // reused by a later snapshot while the entry lives.
    let mut targets: HashMap<*const GnnModel<T>, (Arc<GnnModel<T>>, Vec<Tensor<T>>)> = HashMap::new();

    for step in 0..config.steps {
        if step % config.refresh_every == 0 || queue.is_empty() {
            let current = start.updated(TopologyMlp::from_params(phi.clone())?, Some(plugin.clone()))?;
            let seed = config.seed.wrapping_add(1 + step as u64);
            sample_trajectory(
                &current.training_view()?,
                spec,
                config.trajectory_len,
                config.trajectory_samples,
                &config.trajectory_training,
                &mut queue,
                seed,
            )?;
            if queue.is_empty() {
                return Err(Error::Diverged { epoch: 0, loss: f64::NAN });
            }
            targets.retain(|_, (m, _)| queue.iter().any(|q| Arc::ptr_eq(q, m)));
        }
        let model = queue.sample(&mut rng).expect("queue is non-empty");
        let key = Arc::as_ptr(&model);
        if !targets.contains_key(&key) {
            let t = similarity_target(&model, &real, c, config.sim_temperature)?;
            targets.insert(key, (model.clone(), t));
        }
        let sim_target = &targets[&key].1;

        let phase = phase_at(step, config.plugin_period, config.topology_period);
        let tape = Tape::new();
        let nan = |e: Error| match e {
            Error::NonFinite(_) => Error::NanLoss { step },
            other => other,
        };
        let train_plugin = phase == Phase::Features;
        let x0 = tape.constant(base.clone());
        let (left, right) = if train_plugin {
            (tape.leaf(plugin.left.clone()), tape.leaf(plugin.right.clone()))
        } else {
            (tape.constant(plugin.left.clone()), tape.constant(plugin.right.clone()))
        };
        let pv: Vec<Var> = phi
            .iter()
            .map(|p| if train_plugin { tape.constant(p.clone()) } else { tape.leaf(p.clone()) })
            .collect();
        let objective = TransferObjective {
            model: &model,
            similarity_target: sim_target,
            feature_target: &target,
            labels: &labels,
            ratios: &ratios,
            hops: start.hops(),
            w_loop,
            config,
        };
        let terms = transfer_loss_on(&tape, &objective, x0, left, right, &pv).map_err(nan)?;
        let TransferTerms { total, sdm, feature: feat, cdr, features: xu, adjacency } = terms;
        let loss = tape.scalar_value(total)?.as_f64();
        if !loss.is_finite() {
            return Err(Error::NanLoss { step });
        }
        let record = TransferRecord {
            step,
            phase,
            loss,
            sdm: tape.scalar_value(sdm)?.as_f64(),
            feature: tape.scalar_value(feat)?.as_f64(),
            cdr: tape.scalar_value(cdr)?.as_f64(),
            queue_len: queue.len(),
        };
        observe(&TransferProbe {
            record: &record,
            features: &tape.value(xu),
            adjacency: &tape.value(adjacency),
            labels: &labels,
        });

        let grads = tape.backward(total).map_err(nan)?;
        if train_plugin {
            let current = plugin.params();
            let g = vec![grads.get_or_zeros(left, &current[0]), grads.get_or_zeros(right, &current[1])];
            plugin = LowRankPlugin::from_params(opt_plugin.step(&current, &g)?)?;
            if !plugin.left.is_finite() || !plugin.right.is_finite() {
                return Err(Error::NanLoss { step });
            }
        } else {
            let g: Vec<Tensor<T>> = pv.iter().zip(&phi).map(|(&v, t)| grads.get_or_zeros(v, t)).collect();
            phi = opt_phi.step(&phi, &g)?;
            if phi.iter().any(|t| !t.is_finite()) {
                return Err(Error::NanLoss { step });
            }
        }
    }

    start.updated(TopologyMlp::from_params(phi)?, Some(plugin))
}
