//! Stage 1: condense a graph into a small synthetic one whose multi-hop class
//! statistics and teacher predictions match the original.

mod stats;
mod topology;

pub use stats::{
    class_stats, feature_alignment_loss, feature_alignment_on, ClassStats, CovarianceMode, CovarianceRoute, FeatureLoss,
    FeatureTarget,
};
pub use topology::{sparsify, TopologyMlp};

/// Row indices of each class; errors if a class has no rows.
pub(crate) fn stats_groups(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let all: Vec<usize> = (0..labels.len()).collect();
    stats::group_by_class(labels, &all, num_classes)
}

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Decoder, Encoder, Section};
use crate::error::{Error, Result};
use crate::gnn::{normalize_dense_on_tape, GnnModel, PropVar, Propagator, TrainingView};
use crate::graph::AttributedGraph;
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transfer::{apply_plugin, LowRankPlugin};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondenseConfig {
    /// Condensed size as a fraction of the training nodes.
    pub ratio: f64,
    /// Propagation depth of the matched statistics.
    pub hops: usize,
    pub w_loop: f64,
    /// Weight of the covariance term inside the feature loss.
    pub lambda_cov: f64,
    /// Weight of the feature loss against the logits loss.
    pub lambda_feat: f64,
    pub steps: usize,
    /// Consecutive feature steps, then consecutive topology steps.
    pub feature_period: usize,
    pub topology_period: usize,
    pub lr_features: f64,
    pub lr_topology: f64,
    pub optimizer: OptimizerKind,
    /// Edge weights below this are dropped from the final adjacency.
    pub threshold: f64,
    pub hidden: usize,
    pub covariance: CovarianceMode,
    pub covariance_route: CovarianceRoute,
    pub seed: u64,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        Self {
            ratio: 0.05,
            hops: 2,
            w_loop: 1.0,
            lambda_cov: 0.01,
            lambda_feat: 100.0,
            steps: 1500,
            feature_period: 10,
            topology_period: 1,
            lr_features: 0.005,
            lr_topology: 0.001,
            optimizer: OptimizerKind::Adam,
            threshold: 0.05,
            hidden: 128,
            covariance: CovarianceMode::Full,
            covariance_route: CovarianceRoute::Auto,
            seed: 0,
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad(format!("condensation ratio must lie in (0, 1), got {}", self.ratio));
        }
        if self.steps == 0 {
            return bad("condensation needs at least one step".into());
        }
        if !(self.w_loop >= 0.0 && self.w_loop.is_finite()) {
            return bad(format!("self-loop weight must be non-negative, got {}", self.w_loop));
        }
        if !(self.lambda_cov >= 0.0 && self.lambda_feat >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.feature_period + self.topology_period == 0 {
            return bad("alternation periods cannot both be zero".into());
        }
        if !(self.lr_features > 0.0 && self.lr_topology > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad(format!("sparsification threshold must lie in [0, 1), got {}", self.threshold));
        }
        if self.hidden == 0 {
            return bad("topology MLP needs a positive hidden width".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// `max(C, round(ratio · train))`.
    pub fn condensed_size(&self, train: usize, num_classes: usize) -> usize {
        ((self.ratio * train as f64).round() as usize).max(num_classes)
    }
}

/// A condensed graph: frozen base features, the topology function, fixed
/// labels, an optional low-rank residual from transfer, and the sparsified
/// adjacency derived from them.
#[derive(Clone, Debug)]
pub struct CondensedGraph<T> {
    base_features: Tensor<T>,
    topology: TopologyMlp<T>,
    labels: Vec<usize>,
    num_classes: usize,
    hops: usize,
    w_loop: f64,
    threshold: f64,
    plugin: Option<LowRankPlugin<T>>,
    features: Tensor<T>,
    adjacency: Tensor<T>,
    source_lineage: String,
    config_fingerprint: String,
}

impl<T: Scalar> CondensedGraph<T> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        base_features: Tensor<T>,
        topology: TopologyMlp<T>,
        labels: Vec<usize>,
        num_classes: usize,
        hops: usize,
        w_loop: f64,
        threshold: f64,
        plugin: Option<LowRankPlugin<T>>,
        source_lineage: String,
        config_fingerprint: String,
    ) -> Result<Self> {
        if labels.len() != base_features.rows() {
            return Err(Error::dim("condensed", format!("{} labels for {} rows", labels.len(), base_features.rows())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::dim("condensed", format!("label {y} with {num_classes} classes")));
        }
        if topology.num_features() != base_features.cols() {
            return Err(Error::dim(
                "condensed",
                format!("topology over {} features, graph has {}", topology.num_features(), base_features.cols()),
            ));
        }
        let features = match &plugin {
            Some(p) => apply_plugin(&base_features, p)?,
            None => base_features.clone(),
        };
        let adjacency = sparsify(&topology.adjacency(&features)?, threshold);
        Ok(Self {
            base_features,
            topology,
            labels,
            num_classes,
            hops,
            w_loop,
            threshold,
            plugin,
            features,
            adjacency,
            source_lineage,
            config_fingerprint,
        })
    }

    /// Same labels and provenance with new learnable state.
    pub(crate) fn updated(&self, topology: TopologyMlp<T>, plugin: Option<LowRankPlugin<T>>) -> Result<Self> {
        Self::assemble(
            self.base_features.clone(),
            topology,
            self.labels.clone(),
            self.num_classes,
            self.hops,
            self.w_loop,
            self.threshold,
            plugin,
            self.source_lineage.clone(),
            self.config_fingerprint.clone(),
        )
    }

    /// Folds the residual into the base features, dropping the plugin.
    pub fn consolidated(&self) -> Result<Self> {
        let mut out = self.clone();
        out.base_features = self.features.clone();
        out.plugin = None;
        Ok(out)
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.base_features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn w_loop(&self) -> f64 {
        self.w_loop
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Features before the residual.
    pub fn base_features(&self) -> &Tensor<T> {
        &self.base_features
    }

    /// Effective features, residual included.
    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn topology(&self) -> &TopologyMlp<T> {
        &self.topology
    }

    pub fn plugin(&self) -> Option<&LowRankPlugin<T>> {
        self.plugin.as_ref()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Sparsified adjacency.
    pub fn adjacency(&self) -> &Tensor<T> {
        &self.adjacency
    }

    /// Adjacency before sparsification.
    pub fn dense_adjacency(&self) -> Result<Tensor<T>> {
        self.topology.adjacency(&self.features)
    }

    /// Lineage fingerprint of the graph this was condensed from.
    pub fn source_lineage(&self) -> &str {
        &self.source_lineage
    }

    pub fn config_fingerprint(&self) -> &str {
        &self.config_fingerprint
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Every condensed node is a training node; there is no validation set.
    pub fn training_view(&self) -> Result<TrainingView<T>> {
        TrainingView::dense(&self.adjacency, self.features.clone(), self.labels.clone(), self.num_classes, self.w_loop)
    }
}

impl<T: Scalar> Section for CondensedGraph<T> {
    const TAG: [u8; 4] = *b"COND";

    fn encode(&self, enc: &mut Encoder) {
        enc.tensor(&self.base_features);
        self.topology.encode(enc);
        enc.usizes(&self.labels);
        enc.usize(self.num_classes);
        enc.usize(self.hops);
        enc.f64(self.w_loop);
        enc.f64(self.threshold);
        match &self.plugin {
            Some(p) => {
                enc.u8(1);
                p.encode(enc);
            }
            None => enc.u8(0),
        }
        enc.str(&self.source_lineage);
        enc.str(&self.config_fingerprint);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let base = dec.tensor()?;
        let topology = TopologyMlp::decode(dec)?;
        let labels = dec.usizes()?;
        let num_classes = dec.usize()?;
        let hops = dec.usize()?;
        let w_loop = dec.f64()?;
        let threshold = dec.f64()?;
        let plugin = match dec.u8()? {
            0 => None,
            1 => Some(LowRankPlugin::decode(dec)?),
            other => return Err(dec.fail(format!("invalid plugin flag {other}"))),
        };
        let lineage = dec.str()?;
        let fingerprint = dec.str()?;
        Self::assemble(base, topology, labels, num_classes, hops, w_loop, threshold, plugin, lineage, fingerprint)
            .map_err(|e| dec.fail(e))
    }
}

/// Splits `total` slots in proportion to `counts`, at least one per class,
/// by largest remainder. Requires `total ≥ counts.len()`.
pub fn allocate_classes(counts: &[usize], total: usize) -> Vec<usize> {
    let c = counts.len();
    let n: usize = counts.iter().sum();
    let quota: Vec<f64> = counts.iter().map(|&k| total as f64 * k as f64 / n as f64).collect();
    let mut alloc: Vec<usize> = quota.iter().map(|q| (q.floor() as usize).max(1)).collect();
    let mut sum: usize = alloc.iter().sum();
    while sum < total {
        let i = (0..c)
            .max_by(|&a, &b| (quota[a] - alloc[a] as f64).total_cmp(&(quota[b] - alloc[b] as f64)).then(b.cmp(&a)))
            .expect("classes");
        alloc[i] += 1;
        sum += 1;
    }
    while sum > total {
        let i = (0..c)
            .filter(|&i| alloc[i] > 1)
            .max_by(|&a, &b| (alloc[a] as f64 - quota[a]).total_cmp(&(alloc[b] as f64 - quota[b])).then(b.cmp(&a)))
            .expect("total ≥ classes");
        alloc[i] -= 1;
        sum -= 1;
    }
    alloc
}

/// Initial condensed graph: class-proportional labels, features copied from
/// random training nodes of the same class, a freshly initialized topology MLP.
pub fn init_condensed<T: Scalar>(graph: &AttributedGraph<T>, config: &CondenseConfig) -> Result<CondensedGraph<T>> {
    config.validate()?;
    graph.check_train_coverage()?;
    let train = graph.train_nodes();
    let c = graph.num_classes();
    let n_cond = config.condensed_size(train.len(), c);
    let mut by_class = vec![Vec::new(); c];
    for &i in &train {
        by_class[graph.labels()[i]].push(i);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let alloc = allocate_classes(&counts, n_cond);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::with_capacity(n_cond);
    let mut labels = Vec::with_capacity(n_cond);
    for (class, (pool, &k)) in by_class.iter().zip(&alloc).enumerate() {
        if k <= pool.len() {
            rows.extend(pool.choose_multiple(&mut rng, k).copied());
        } else {
            rows.extend((0..k).map(|_| *pool.choose(&mut rng).expect("non-empty class")));
        }
        labels.extend(std::iter::repeat_n(class, k));
    }
    let features = graph.features().select_rows(&rows)?;
    let topology = TopologyMlp::init(graph.num_features(), config.hidden, config.seed ^ 0x5151_7a7a)?;
    CondensedGraph::assemble(
        features,
        topology,
        labels,
        c,
        config.hops,
        config.w_loop,
        config.threshold,
        None,
        graph.lineage().to_string(),
        config.fingerprint(),
    )
}

/// `[X, P·X, …, P^K·X]`.
pub fn propagate<T: Scalar>(prop: &Propagator<T>, x: &Tensor<T>, hops: usize) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(hops + 1);
    out.push(x.clone());
    for k in 0..hops {
        let next = prop.apply(&out[k])?;
        out.push(next);
    }
    Ok(out)
}

/// Tape version of [`propagate`].
pub fn propagate_on<T: Scalar>(tape: &Tape<T>, prop: PropVar<'_, T>, x: Var, hops: usize) -> Result<Vec<Var>> {
    let mut out = vec![x];
    for k in 0..hops {
        out.push(prop.apply(tape, out[k])?);
    }
    Ok(out)
}

/// Class statistics of a real graph over its training nodes.
pub fn graph_class_stats<T: Scalar>(graph: &AttributedGraph<T>, hops: usize, w_loop: f64) -> Result<ClassStats<T>> {
    let prop = Propagator::from_graph(graph, w_loop)?;
    let h = propagate(&prop, graph.features(), hops)?;
    ClassStats::compute(&h, graph.labels(), &graph.train_nodes(), graph.num_classes())
}

/// Mean cross-entropy of a frozen teacher on a graph placed on the tape.
pub fn logits_alignment_on<T: Scalar>(
    tape: &Tape<T>,
    teacher: &GnnModel<T>,
    prop: PropVar<'_, T>,
    x: Var,
    labels: &[usize],
    num_classes: usize,
) -> Result<Var> {
    if teacher.num_classes() != num_classes {
        return Err(Error::dim("logits_alignment", format!("teacher has {} outputs for {num_classes} classes", teacher.num_classes())));
    }
    let params = teacher.params_on_tape(tape, false);
    let fwd = teacher.forward_on(tape, &params, prop, x, None)?;
    tape.cross_entropy(fwd.logits, labels)
}

/// Value of the logits loss for a dense adjacency and features.
pub fn logits_alignment_loss<T: Scalar>(
    teacher: &GnnModel<T>,
    adjacency: &Tensor<T>,
    features: &Tensor<T>,
    labels: &[usize],
    num_classes: usize,
    w_loop: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let a = tape.constant(adjacency.clone());
    let p = normalize_dense_on_tape(&tape, a, w_loop)?;
    let x = tape.constant(features.clone());
    let l = logits_alignment_on(&tape, teacher, PropVar::Dense(p), x, labels, num_classes)?;
    Ok(tape.scalar_value(l)?.as_f64())
}

/// Which parameter group a step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Features,
    Topology,
}

/// Alternation schedule: the first `first` steps of every period go to the
/// first group.
pub fn phase_at(step: usize, first: usize, second: usize) -> Phase {
    if step % (first + second) < first {
        Phase::Features
    } else {
        Phase::Topology
    }
}

/// Losses at one condensation step, evaluated before its update.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub logits: f64,
    pub feature: f64,
}

/// Everything one forward pass of the condensation objective produces.
pub struct CondenseForward {
    pub adjacency: Var,
    pub logits: Var,
    pub feature: Var,
    pub total: Var,
}

/// Logits loss plus `λ_feat` times the feature loss, for condensed features `x`
/// and topology parameters `topology`.
pub fn condense_forward<T: Scalar>(
    tape: &Tape<T>,
    teacher: &GnnModel<T>,
    target: &FeatureTarget<T>,
    topology: &[Var],
    x: Var,
    labels: &[usize],
    num_classes: usize,
    config: &CondenseConfig,
) -> Result<CondenseForward> {
    let adjacency = TopologyMlp::adjacency_on(tape, topology, x)?;
    let p = normalize_dense_on_tape(tape, adjacency, config.w_loop)?;
    let logits = logits_alignment_on(tape, teacher, PropVar::Dense(p), x, labels, num_classes)?;
    let h = propagate_on(tape, PropVar::Dense(p), x, config.hops)?;
    let feature = feature_alignment_on(tape, target, &h, labels, config.lambda_cov)?.total;
    let total = tape.add(logits, tape.scale(feature, T::lit(config.lambda_feat))?)?;
    Ok(CondenseForward { adjacency, logits, feature, total })
}

pub fn condense<T: Scalar>(graph: &AttributedGraph<T>, teacher: &GnnModel<T>, config: &CondenseConfig) -> Result<CondensedGraph<T>> {
    condense_observed(graph, teacher, config, |_, _| {})
}

/// As [`condense`], calling `observe(record, pre_sparsification_adjacency)`
/// at every step.
pub fn condense_observed<T: Scalar>(
    graph: &AttributedGraph<T>,
    teacher: &GnnModel<T>,
    config: &CondenseConfig,
    mut observe: impl FnMut(&StepRecord, &Tensor<T>),
) -> Result<CondensedGraph<T>> {
    let init = init_condensed(graph, config)?;
    if teacher.in_dim() != graph.num_features() {
        return Err(Error::dim("condense", format!("teacher takes {} features, graph has {}", teacher.in_dim(), graph.num_features())));
    }
    let stats = graph_class_stats(graph, config.hops, config.w_loop)?;
    let target = FeatureTarget::new(&stats, config.covariance, config.covariance_route)?;

    let labels = init.labels().to_vec();
    let c = graph.num_classes();
    let mut x = init.base_features().clone();
    let mut phi = init.topology().params().to_vec();
    let mut opt_x = Optimizer::new(config.optimizer, config.lr_features, 0.0);
    let mut opt_phi = Optimizer::new(config.optimizer, config.lr_topology, 0.0);

    for step in 0..config.steps {
        let phase = phase_at(step, config.feature_period, config.topology_period);
        let tape = Tape::new();
        let xv = if phase == Phase::Features { tape.leaf(x.clone()) } else { tape.constant(x.clone()) };
        let pv: Vec<Var> = phi
            .iter()
            .map(|p| if phase == Phase::Topology { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        let nan = |e: Error| match e {
            Error::NonFinite(_) => Error::NanLoss { step },
            other => other,
        };
        let fwd = condense_forward(&tape, teacher, &target, &pv, xv, &labels, c, config).map_err(nan)?;
        let loss = tape.scalar_value(fwd.total)?.as_f64();
        if !loss.is_finite() {
            return Err(Error::NanLoss { step });
        }
        let record = StepRecord {
            step,
            phase,
            loss,
            logits: tape.scalar_value(fwd.logits)?.as_f64(),
            feature: tape.scalar_value(fwd.feature)?.as_f64(),
        };
        observe(&record, &tape.value(fwd.adjacency));

        let grads = tape.backward(fwd.total).map_err(nan)?;
        match phase {
            Phase::Features => {
                let g = grads.get_or_zeros(xv, &x);
                x = opt_x.step(std::slice::from_ref(&x), &[g])?.pop().expect("one tensor");
                if !x.is_finite() {
                    return Err(Error::NanLoss { step });
                }
            }
            Phase::Topology => {
                let g: Vec<Tensor<T>> = pv.iter().zip(&phi).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
                phi = opt_phi.step(&phi, &g)?;
                if phi.iter().any(|p| !p.is_finite()) {
                    return Err(Error::NanLoss { step });
                }
            }
        }
    }

    CondensedGraph::assemble(
        x,
        TopologyMlp::from_params(phi)?,
        labels,
        c,
        config.hops,
        config.w_loop,
        config.threshold,
        None,
        graph.lineage().to_string(),
        config.fingerprint(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_is_proportional_with_every_class_present() {
        assert_eq!(allocate_classes(&[50, 50], 10), vec![5, 5]);
        assert_eq!(allocate_classes(&[1000, 1], 10), vec![9, 1]);
        let a = allocate_classes(&[351, 217, 418, 818, 426, 298, 180], 95);
        assert_eq!(a.iter().sum::<usize>(), 95);
        assert!(a.iter().all(|&k| k >= 1));
    }

    #[test]
    fn phase_schedule_alternates() {
        let p: Vec<Phase> = (0..6).map(|t| phase_at(t, 2, 1)).collect();
        use Phase::*;
        assert_eq!(p, vec![Features, Features, Topology, Features, Features, Topology]);
        assert!((0..5).all(|t| phase_at(t, 0, 1) == Topology));
    }

    #[test]
    fn condensed_size_rounds_and_floors_at_class_count() {
        let c = CondenseConfig::default();
        assert_eq!(c.condensed_size(1895, 7), 95);
        assert_eq!(c.condensed_size(20, 7), 7);
    }

    #[test]
    fn config_validation() {
        let mut c = CondenseConfig { ratio: 1.5, ..Default::default() };
        assert!(c.validate().is_err());
        c.ratio = 0.1;
        c.threshold = 1.0;
        assert!(c.validate().is_err());
        c.threshold = 0.0;
        assert!(c.validate().is_ok());
    }
}
