//! Stage orchestration: pre-condense once, transfer per deletion request,
//! retrain on the transferred graph, and time each stage.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Metadata};
use crate::condense::{condense, CondenseConfig, CondensedGraph};
use crate::error::{Error, Result};
use crate::eval::{mia_attack, utility_report, MiaReport};
use crate::gnn::{train_gnn, GnnModel, GnnSpec, TrainConfig, TrainingView};
use crate::graph::{apply_deletion, sample_deletion, AttributedGraph, DeletionKind, DeletionRequest};
use crate::scalar::Scalar;
use crate::transfer::{transfer, TransferConfig};

/// Every knob of the three stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub gnn: GnnSpec,
    pub train: TrainConfig,
    pub condense: CondenseConfig,
    pub transfer: TransferConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.gnn.validate()?;
        self.train.validate()?;
        self.condense.validate()?;
        self.transfer.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Trains the model that is later unlearned (and serves as the condensation teacher).
pub fn train_original<T: Scalar>(graph: &AttributedGraph<T>, spec: &GnnSpec, train: &TrainConfig) -> Result<GnnModel<T>> {
    let view = TrainingView::from_graph(graph, spec.w_loop)?;
    let model = GnnModel::init(*spec, graph.num_features(), graph.num_classes(), train.seed)?;
    Ok(train_gnn(&model, &view, train)?.model)
}

/// Stage 1 with wall time in seconds.
pub fn precondense<T: Scalar>(
    graph: &AttributedGraph<T>,
    teacher: &GnnModel<T>,
    config: &CondenseConfig,
) -> Result<(CondensedGraph<T>, f64)> {
    let start = Instant::now();
    let condensed = condense(graph, teacher, config)?;
    Ok((condensed, start.elapsed().as_secs_f64()))
}

/// Fresh model of the given architecture trained on every condensed node.
pub fn retrain<T: Scalar>(condensed: &CondensedGraph<T>, spec: &GnnSpec, train: &TrainConfig) -> Result<GnnModel<T>> {
    let view = condensed.training_view()?;
    let model = GnnModel::init(*spec, condensed.num_features(), condensed.num_classes(), train.seed)?;
    Ok(train_gnn(&model, &view, train)?.model)
}

/// The baseline: retrain from scratch on the remaining graph. Returns the
/// model and its wall time in seconds.
pub fn retrain_baseline<T: Scalar>(remaining: &AttributedGraph<T>, spec: &GnnSpec, train: &TrainConfig) -> Result<(GnnModel<T>, f64)> {
    let start = Instant::now();
    let model = train_original(remaining, spec, train)?;
    Ok((model, start.elapsed().as_secs_f64()))
}

/// Wall time per stage in seconds. Stage 1 is a one-off and not part of
/// the unlearning time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stage1: Option<f64>,
    pub stage2: f64,
    pub stage3: f64,
}

impl Timings {
    pub fn unlearning(&self) -> f64 {
        self.stage2 + self.stage3
    }
}

/// Outcome of one unlearning request.
#[derive(Clone, Debug)]
pub struct UnlearnRun<T> {
    pub transferred: CondensedGraph<T>,
    pub model: GnnModel<T>,
    pub timings: Timings,
    pub transfer_seed: u64,
    pub retrain_seed: u64,
}

impl<T: Scalar> UnlearnRun<T> {
    /// Writes the transferred graph and the unlearned model as checkpoints.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cond = dir.join("transferred.tcgu");
        let model = dir.join("unlearned_model.tcgu");
        Checkpoint::new().with(&self.transferred).write(&cond)?;
        Checkpoint::new().with(&self.model).write(&model)?;
        Ok(vec![cond, model])
    }
}

/// Transfers `condensed` to the remaining graph and retrains a model with
/// the original architecture on the result. Only the remaining graph is
/// seen; the deleted data is not a parameter.
pub fn unlearn<T: Scalar>(
    original: &GnnModel<T>,
    condensed: &CondensedGraph<T>,
    remaining: &AttributedGraph<T>,
    config: &PipelineConfig,
) -> Result<UnlearnRun<T>> {
    if condensed.source_lineage() != remaining.lineage() {
        return Err(Error::Fingerprint {
            expected: condensed.source_lineage().to_string(),
            found: remaining.lineage().to_string(),
        });
    }
    let spec = *original.spec();
    let start = Instant::now();
    let transferred = transfer(condensed, remaining, &spec, &config.transfer)?;
    let stage2 = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let model = retrain(&transferred, &spec, &config.train)?;
    let stage3 = start.elapsed().as_secs_f64();
    Ok(UnlearnRun {
        transferred,
        model,
        timings: Timings {
            stage1: None,
            stage2,
            stage3,
        },
        transfer_seed: config.transfer.seed,
        retrain_seed: config.train.seed,
    })
}

/// One batch of sequential unlearning.
#[derive(Clone, Debug)]
pub struct SequentialStep<T> {
    pub batch: usize,
    /// Original ids of every node deleted so far.
    pub deleted: Vec<usize>,
    pub run: UnlearnRun<T>,
    /// Test micro-F1 on the remaining graph.
    pub utility: f64,
    pub mia: Option<MiaReport>,
}

#[derive(Clone, Debug)]
pub struct SequentialOutcome<T> {
    pub steps: Vec<SequentialStep<T>>,
    /// Why the sequence ended early, if it did.
    pub stopped: Option<String>,
}

/// Deletes `n_batches` batches of `batch_ratio·|train|` training nodes
/// cumulatively. Each batch continues from the previous batch's transferred
/// graph with a fresh residual and an empty function queue. Membership
/// inference (when `mia_seed` is set) attacks the cumulative deleted set
/// against the test nodes of `graph`.
pub fn sequential_unlearn<T: Scalar>(
    graph: &AttributedGraph<T>,
    original: &GnnModel<T>,
    condensed: &CondensedGraph<T>,
    batch_ratio: f64,
    n_batches: usize,
    config: &PipelineConfig,
    seed: u64,
    mia_seed: Option<u64>,
) -> Result<SequentialOutcome<T>> {
    if !(batch_ratio > 0.0) || n_batches == 0 || batch_ratio * n_batches as f64 > 0.5 + 1e-12 {
        return Err(Error::Config(format!(
            "{n_batches} batches of {batch_ratio} must delete a positive share of at most half the training nodes"
        )));
    }
    let per_batch = (batch_ratio * graph.train_nodes().len() as f64).floor() as usize;
    if per_batch == 0 {
        return Err(Error::Config("batch ratio selects no training node".into()));
    }
    let heldout = graph.test_nodes();
    let mut remaining = graph.clone();
    let mut current = condensed.clone();
    let mut deleted = Vec::new();
    let mut steps = Vec::new();
    for batch in 0..n_batches {
        let train_now = remaining.train_nodes().len();
        let ratio = per_batch as f64 / train_now as f64;
        let request = match sample_deletion(&remaining, DeletionKind::Node, ratio, seed.wrapping_add(batch as u64)) {
            Ok(r) => r,
            Err(e) => return Ok(SequentialOutcome { steps, stopped: Some(format!("batch {batch}: {e}")) }),
        };
        deleted.extend(request.nodes.iter().map(|&i| remaining.original_ids()[i]));
        let next = apply_deletion(&remaining, &request)?;
        if let Err(e) = next.check_train_coverage() {
            return Ok(SequentialOutcome {
                steps,
                stopped: Some(format!("batch {batch}: {e}")),
            });
        }
        remaining = next;
        let batch_config = PipelineConfig {
            transfer: TransferConfig {
                seed: config.transfer.seed.wrapping_add(batch as u64),
                ..config.transfer.clone()
            },
            ..config.clone()
        };
        let run = unlearn(original, &current, &remaining, &batch_config)?;
        let utility = utility_report(&run.model, &remaining)?;
        let mia = match mia_seed {
            Some(s) => Some(mia_attack(original, &run.model, graph, &deleted, &heldout, s)?),
            None => None,
        };
        current = run.transferred.clone();
        steps.push(SequentialStep {
            batch,
            deleted: deleted.clone(),
            run,
            utility,
            mia,
        });
    }
    Ok(SequentialOutcome { steps, stopped: None })
}

/// Stable short identifier of a deletion request.
pub fn request_id(request: &DeletionRequest) -> String {
    let bytes = serde_json::to_vec(request).expect("request serializes");
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Machine-readable record of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub dataset: String,
    pub split_seed: u64,
    pub request: Option<serde_json::Value>,
    pub configs: PipelineConfig,
    pub config_hash: String,
    pub library_version: String,
    /// Seconds, rounded to milliseconds.
    pub timings_s: serde_json::Map<String, serde_json::Value>,
    pub metrics: serde_json::Map<String, serde_json::Value>,
    pub artifact_paths: Vec<String>,
}

/// Rounds seconds to millisecond resolution.
pub fn millis(seconds: f64) -> f64 {
    (seconds * 1000.0).round() / 1000.0
}

impl RunManifest {
    pub fn new(dataset: impl Into<String>, split_seed: u64, configs: &PipelineConfig) -> Self {
        Self {
            dataset: dataset.into(),
            split_seed,
            request: None,
            config_hash: configs.fingerprint(),
            configs: configs.clone(),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            timings_s: Default::default(),
            metrics: Default::default(),
            artifact_paths: Vec::new(),
        }
    }

    pub fn record_timings(&mut self, t: &Timings) {
        if let Some(s1) = t.stage1 {
            self.timings_s.insert("stage1".into(), millis(s1).into());
        }
        self.timings_s.insert("stage2".into(), millis(t.stage2).into());
        self.timings_s.insert("stage3".into(), millis(t.stage3).into());
        self.timings_s.insert("unlearning".into(), millis(t.unlearning()).into());
    }

    pub fn metric(&mut self, name: &str, value: impl Serialize) {
        self.metrics.insert(name.into(), serde_json::to_value(value).expect("metric serializes"));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// As checkpoint metadata.
    pub fn to_metadata(&self) -> Metadata {
        Metadata(serde_json::to_value(self).expect("manifest serializes"))
    }
}
