//! Utility, membership-inference and edge-attack evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{micro_f1, GnnModel, Propagator};
use crate::graph::{apply_deletion, inject_adversarial_edges, AttributedGraph, DeletionKind, DeletionRequest};
use crate::pipeline::{precondense, train_original, unlearn, PipelineConfig};
use crate::scalar::Scalar;

/// Test micro-F1 of `model` with message passing over `graph`.
pub fn utility_report<T: Scalar>(model: &GnnModel<T>, graph: &AttributedGraph<T>) -> Result<f64> {
    let test = graph.test_nodes();
    if test.is_empty() {
        return Err(Error::Eval("graph has no test nodes".into()));
    }
    let prop = Propagator::from_graph(graph, model.spec().w_loop)?;
    micro_f1(&model.logits(&prop, graph.features())?, graph.labels(), &test)
}

/// Area under the ROC curve of `scores` for the positives in `labels`
/// (Mann–Whitney statistic, ties counted half).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Eval("AUC needs both positives and negatives".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auc scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| labels[order[k]]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// L2-regularized logistic regression on standardized features, fitted by
/// full-batch gradient descent.
#[derive(Clone, Debug)]
pub struct LogisticRegression {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

impl LogisticRegression {
    pub fn fit(x: &[Vec<f64>], y: &[bool], l2: f64, iterations: usize) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::Eval(format!("{n} rows for {} labels", y.len())));
        }
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let scale: Vec<f64> = scale.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        let mut model = Self {
            mean,
            scale,
            weights: vec![0.0; d],
            bias: 0.0,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| model.standardize(r)).collect();
        let lr = 0.5;
        for _ in 0..iterations {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (row, &label) in z.iter().zip(y) {
                let err = sigmoid(model.margin(row)) - if label { 1.0 } else { 0.0 };
                for (g, v) in gw.iter_mut().zip(row) {
                    *g += err * v / n as f64;
                }
                gb += err / n as f64;
            }
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= lr * (g + l2 * *w);
            }
            model.bias -= lr * gb;
        }
        Ok(model)
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn margin(&self, z: &[f64]) -> f64 {
        self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Membership probability.
    pub fn predict(&self, row: &[f64]) -> f64 {
        sigmoid(self.margin(&self.standardize(row)))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-40.0, 40.0)).exp())
}

/// AUC of a logistic-regression attacker on each held-out fold of a
/// stratified `folds`-fold split.
pub fn cross_validated_auc(x: &[Vec<f64>], y: &[bool], folds: usize, seed: u64) -> Result<Vec<f64>> {
    let mut pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let mut neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
    if pos.len() < folds || neg.len() < folds {
        return Err(Error::Eval(format!(
            "{folds}-fold attack needs at least {folds} members and non-members, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold_of = vec![0; y.len()];
    for (k, &i) in pos.iter().enumerate() {
        fold_of[i] = k % folds;
    }
    for (k, &i) in neg.iter().enumerate() {
        fold_of[i] = k % folds;
    }
    (0..folds)
        .map(|f| {
            let (train, test): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|&i| fold_of[i] != f);
            let xt: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
            let yt: Vec<bool> = train.iter().map(|&i| y[i]).collect();
            let model = LogisticRegression::fit(&xt, &yt, 1e-3, 300)?;
            let scores: Vec<f64> = test.iter().map(|&i| model.predict(&x[i])).collect();
            let labels: Vec<bool> = test.iter().map(|&i| y[i]).collect();
            roc_auc(&scores, &labels)
        })
        .collect()
}

/// Row-wise softmax of a model's logits over `graph`, as `f64`.
pub fn posteriors<T: Scalar>(model: &GnnModel<T>, graph: &AttributedGraph<T>) -> Result<Vec<Vec<f64>>> {
    let prop = Propagator::from_graph(graph, model.spec().w_loop)?;
    let logits = model.logits(&prop, graph.features())?;
    Ok((0..logits.rows())
        .map(|i| {
            let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

/// Attack features from one model's posterior: the probabilities sorted in
/// decreasing order, the probability of the true label, and the entropy.
pub fn single_model_features(p: &[f64], label: usize) -> Vec<f64> {
    let mut sorted = p.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let entropy = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    sorted.push(p[label]);
    sorted.push(entropy);
    sorted
}

/// Attack features from both models: `[p_orig ‖ p_unl ‖ p_orig − p_unl ‖ ‖p_orig − p_unl‖]`.
pub fn two_model_features(orig: &[f64], unl: &[f64]) -> Vec<f64> {
    let diff: Vec<f64> = orig.iter().zip(unl).map(|(a, b)| a - b).collect();
    let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    orig.iter().chain(unl).chain(&diff).copied().chain(std::iter::once(dist)).collect()
}

pub const MIA_FOLDS: usize = 5;

/// Membership-inference result. `auc` is the primary score: the attacker
/// sees the unlearned model's posteriors. `two_model_auc` uses features
/// from both the original and the unlearned model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiaReport {
    pub auc: f64,
    pub auc_std: f64,
    pub fold_aucs: Vec<f64>,
    pub two_model_auc: f64,
    pub n_positives: usize,
    pub n_negatives: usize,
    pub attacker: String,
    pub seed: u64,
    /// 0.5 is a random guess.
    pub reference_auc: f64,
}

/// Members (`deleted`, ids in `graph`) against never-trained `heldout` nodes.
pub fn mia_attack<T: Scalar>(
    original: &GnnModel<T>,
    unlearned: &GnnModel<T>,
    graph: &AttributedGraph<T>,
    deleted: &[usize],
    heldout: &[usize],
    seed: u64,
) -> Result<MiaReport> {
    if deleted.len() < 10 || heldout.len() < 10 {
        return Err(Error::Eval(format!(
            "membership inference needs at least 10 members and 10 non-members, got {} and {}",
            deleted.len(),
            heldout.len()
        )));
    }
    let n = graph.num_nodes();
    if let Some(&bad) = deleted.iter().chain(heldout).find(|&&i| i >= n) {
        return Err(Error::Eval(format!("node {bad} is outside the graph")));
    }
    let po = posteriors(original, graph)?;
    let pu = posteriors(unlearned, graph)?;
    let nodes: Vec<usize> = deleted.iter().chain(heldout).copied().collect();
    let y: Vec<bool> = (0..nodes.len()).map(|k| k < deleted.len()).collect();
    let single: Vec<Vec<f64>> = nodes.iter().map(|&i| single_model_features(&pu[i], graph.labels()[i])).collect();
    let first = &single[0];
    if single.iter().all(|r| r.iter().zip(first).all(|(a, b)| (a - b).abs() < 1e-12)) {
        return Err(Error::Eval("posteriors are identical for every node; the attack is degenerate".into()));
    }
    let both: Vec<Vec<f64>> = nodes.iter().map(|&i| two_model_features(&po[i], &pu[i])).collect();
    let folds = cross_validated_auc(&single, &y, MIA_FOLDS, seed)?;
    let two = cross_validated_auc(&both, &y, MIA_FOLDS, seed)?;
    let (auc, auc_std) = mean_std(&folds);
    Ok(MiaReport {
        auc,
        auc_std,
        fold_aucs: folds,
        two_model_auc: mean_std(&two).0,
        n_positives: deleted.len(),
        n_negatives: heldout.len(),
        attacker: format!(
            "logistic regression, {MIA_FOLDS}-fold stratified CV; primary features: sorted posterior, true-label probability and entropy of the unlearned model"
        ),
        seed,
        reference_auc: 0.5,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

/// One point of the adversarial-edge curve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeAttackPoint {
    pub ratio: f64,
    pub injected: Vec<usize>,
    /// Model trained and evaluated on the corrupted graph.
    pub corrupted_f1: Vec<f64>,
    /// Unlearned model evaluated on the remaining (clean) graph.
    pub unlearned_f1: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl EdgeAttackPoint {
    pub fn corrupted_mean(&self) -> f64 {
        mean_std(&self.corrupted_f1).0
    }

    pub fn unlearned_mean(&self) -> f64 {
        mean_std(&self.unlearned_f1).0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeAttackCurve {
    pub clean_f1: Vec<f64>,
    pub points: Vec<EdgeAttackPoint>,
    /// Ratios skipped because injection was infeasible.
    pub skipped: Vec<(f64, String)>,
}

/// For each ratio and seed: inject adversarial edges, train the original
/// model and condense on the corrupted graph, then unlearn exactly the
/// injected edges through the pipeline.
pub fn edge_attack_eval<T: Scalar>(
    graph: &AttributedGraph<T>,
    ratios: &[f64],
    config: &PipelineConfig,
    seeds: &[u64],
) -> Result<EdgeAttackCurve> {
    if let Some(r) = ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::Config(format!("attack ratio {r} is outside (0, 1]")));
    }
    let with_seed = |s: u64| {
        let mut c = config.clone();
        c.train.seed = s;
        c.condense.seed = s;
        c.transfer.seed = s;
        c
    };
    let clean_f1 = seeds
        .iter()
        .map(|&s| {
            let c = with_seed(s);
            utility_report(&train_original(graph, &c.gnn, &c.train)?, graph)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    'ratios: for &ratio in ratios {
        let mut point = EdgeAttackPoint {
            ratio,
            injected: Vec::new(),
            corrupted_f1: Vec::new(),
            unlearned_f1: Vec::new(),
            seeds: seeds.to_vec(),
        };
        for &s in seeds {
            let c = with_seed(s);
            let (corrupted, injected) = match inject_adversarial_edges(graph, ratio, s) {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("skipping attack ratio {ratio}: {e}");
                    skipped.push((ratio, e.to_string()));
                    continue 'ratios;
                }
            };
            let original = train_original(&corrupted, &c.gnn, &c.train)?;
            point.corrupted_f1.push(utility_report(&original, &corrupted)?);
            let (condensed, _) = precondense(&corrupted, &original, &c.condense)?;
            let request = DeletionRequest {
                kind: DeletionKind::Edge,
                nodes: Vec::new(),
                edges: injected.clone(),
                ratio,
                seed: s,
            };
            let remaining = apply_deletion(&corrupted, &request)?;
            let run = unlearn(&original, &condensed, &remaining, &c)?;
            point.unlearned_f1.push(utility_report(&run.model, &remaining)?);
            point.injected.push(injected.len());
        }
        points.push(point);
    }
    Ok(EdgeAttackCurve {
        clean_f1,
        points,
        skipped,
    })
}

impl EdgeAttackCurve {
    fn rows(&self) -> Vec<[f64; 5]> {
        let (clean, _) = mean_std(&self.clean_f1);
        let mut rows = vec![[0.0, clean, clean, 0.0, 0.0]];
        for p in &self.points {
            let (c, cs) = mean_std(&p.corrupted_f1);
            let (u, us) = mean_std(&p.unlearned_f1);
            rows.push([p.ratio, c, u, cs, us]);
        }
        rows
    }

    /// `ratio,corrupted_f1,unlearned_f1,corrupted_std,unlearned_std`; ratio 0 is the clean graph.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Eval(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| Error::Eval(format!("{}: {e}", path.display()));
        w.write_record(["ratio", "corrupted_f1", "unlearned_f1", "corrupted_std", "unlearned_std"]).map_err(io)?;
        for r in self.rows() {
            w.write_record(r.iter().map(|v| format!("{v:.6}"))).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Whitespace-separated columns with a `#` header, for gnuplot.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::from("# ratio\tcorrupted_f1\tunlearned_f1\tcorrupted_std\tunlearned_std\n");
        for r in self.rows() {
            out.push_str(&r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join("\t"));
            out.push('\n');
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Micro-F1 of a model on given nodes of a graph (evaluation helper).
pub fn f1_on<T: Scalar>(model: &GnnModel<T>, graph: &AttributedGraph<T>, nodes: &[usize]) -> Result<f64> {
    let prop = Propagator::from_graph(graph, model.spec().w_loop)?;
    micro_f1(&model.logits(&prop, graph.features())?, graph.labels(), nodes)
}
