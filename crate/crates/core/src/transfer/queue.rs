//! Embedding functions sampled from training trajectories on the condensed graph.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gnn::{train_gnn_observed, GnnModel, GnnSpec, TrainConfig, TrainingView};
use crate::scalar::Scalar;

/// Bounded FIFO of immutable model snapshots; pushing beyond capacity
/// evicts the oldest.
#[derive(Clone, Debug)]
pub struct FunctionQueue<T> {
    items: VecDeque<Arc<GnnModel<T>>>,
    capacity: usize,
}

impl<T: Scalar> FunctionQueue<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("function queue capacity must be positive".into()));
        }
        Ok(Self {
            items: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, model: GnnModel<T>) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(Arc::new(model));
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// A uniformly drawn snapshot, or `None` when empty.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Arc<GnnModel<T>>> {
        if self.items.is_empty() {
            return None;
        }
        Some(Arc::clone(&self.items[rng.random_range(0..self.items.len())]))
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Arc<GnnModel<T>>> {
        self.items.iter()
    }
}

/// Epoch stride between snapshots: `⌈length / samples⌉`.
pub fn snapshot_stride(length: usize, samples: usize) -> usize {
    length.div_ceil(samples.max(1)).max(1)
}

/// Trains a fresh model on `view` for `length` epochs and pushes the
/// parameters seen at every `⌈length / samples⌉`-th epoch, starting with the
/// untrained ones. Returns how many snapshots were pushed. If training
/// diverges, the snapshots taken so far are kept and the rest skipped.
pub fn sample_trajectory<T: Scalar>(
    view: &TrainingView<T>,
    spec: &GnnSpec,
    length: usize,
    samples: usize,
    train: &TrainConfig,
    queue: &mut FunctionQueue<T>,
    seed: u64,
) -> Result<usize> {
    if samples == 0 || samples > length {
        return Err(Error::Config(format!("trajectory of {length} epochs cannot yield {samples} samples")));
    }
    let model = GnnModel::init(spec.clone(), view.features.cols(), view.num_classes, seed)?;
    let stride = snapshot_stride(length, samples);
    // Epochs after the last snapshot would never be observed.
    let config = TrainConfig {
        epochs: ((samples - 1) * stride + 1).min(length),
        select_on_val: false,
        seed,
        ..train.clone()
    };
    let mut pushed = 0;
    let outcome = train_gnn_observed(&model, view, &config, |epoch, snapshot, _| {
        if epoch % stride == 0 {
            queue.push(snapshot.clone());
            pushed += 1;
        }
    });
    match outcome {
        Ok(_) => Ok(pushed),
        Err(e @ (Error::Diverged { .. } | Error::NonFinite(_))) => {
            log::warn!("trajectory training diverged after {pushed} snapshots: {e}");
            Ok(pushed)
        }
        Err(e) => Err(e),
    }
}
