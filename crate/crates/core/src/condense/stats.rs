//! Class-wise multi-hop feature statistics and the feature alignment loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-hop, per-class means and centered rows of propagated features.
/// Covariances are formed on demand.
#[derive(Clone, Debug)]
pub struct ClassStats<T> {
    means: Vec<Vec<Tensor<T>>>,
    centered: Vec<Vec<Tensor<T>>>,
    counts: Vec<usize>,
    ratios: Vec<f64>,
    num_features: usize,
}

/// Node indices of each class among `nodes`.
pub(crate) fn group_by_class(labels: &[usize], nodes: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); num_classes];
    for &i in nodes {
        let y = labels[i];
        if y >= num_classes {
            return Err(Error::dim("class_stats", format!("label {y} with {num_classes} classes")));
        }
        groups[y].push(i);
    }
    if let Some(c) = groups.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("class {c} has no nodes")));
    }
    Ok(groups)
}

impl<T: Scalar> ClassStats<T> {
    /// Statistics of `h[k]` rows listed in `nodes`, grouped by label.
    pub fn compute(h: &[Tensor<T>], labels: &[usize], nodes: &[usize], num_classes: usize) -> Result<Self> {
        let f = h.first().map(Tensor::cols).ok_or_else(|| Error::Contract("no hops given".into()))?;
        let groups = group_by_class(labels, nodes, num_classes)?;
        let mut means = Vec::with_capacity(h.len());
        let mut centered = Vec::with_capacity(h.len());
        for hk in h {
            if hk.cols() != f || hk.rows() != labels.len() {
                return Err(Error::dim("class_stats", format!("hop matrix {:?} for {} labels", hk.shape(), labels.len())));
            }
            let mut mk = Vec::with_capacity(num_classes);
            let mut ck = Vec::with_capacity(num_classes);
            for g in &groups {
                let rows = hk.select_rows(g)?;
                let mu = rows.mean_rows();
                let c = rows.zip_map(&broadcast(&mu, rows.rows()), "class_stats", |a, b| a - b)?;
                mk.push(mu);
                ck.push(c);
            }
            means.push(mk);
            centered.push(ck);
        }
        let total = nodes.len() as f64;
        Ok(Self {
            means,
            centered,
            counts: groups.iter().map(Vec::len).collect(),
            ratios: groups.iter().map(|g| g.len() as f64 / total).collect(),
            num_features: f,
        })
    }

    pub fn num_hops(&self) -> usize {
        self.means.len()
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Share of each class among the summarized nodes; sums to one.
    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn mean(&self, hop: usize, class: usize) -> &Tensor<T> {
        &self.means[hop][class]
    }

    pub fn centered(&self, hop: usize, class: usize) -> &Tensor<T> {
        &self.centered[hop][class]
    }

    /// Sample covariance with divisor `n − 1`; zero for single-node classes.
    pub fn covariance(&self, hop: usize, class: usize) -> Tensor<T> {
        let a = &self.centered[hop][class];
        if a.rows() < 2 {
            return Tensor::zeros(self.num_features, self.num_features);
        }
        let g = a.transpose().matmul(a).expect("square by construction");
        g.scale(T::one() / T::lit((a.rows() - 1) as f64))
    }
}

/// Statistics of every row, grouped by `labels`.
pub fn class_stats<T: Scalar>(h: &[Tensor<T>], labels: &[usize], num_classes: usize) -> Result<ClassStats<T>> {
    let nodes: Vec<usize> = (0..labels.len()).collect();
    ClassStats::compute(h, labels, &nodes, num_classes)
}

fn broadcast<T: Scalar>(row: &Tensor<T>, m: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(m * row.cols());
    for _ in 0..m {
        data.extend_from_slice(row.data());
    }
    Tensor::new(m, row.cols(), data).expect("consistent sizes")
}

/// How the covariance term is matched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    /// Full `F×F` covariances.
    #[default]
    Full,
    /// Only the per-feature variances; a low-memory approximation.
    Diagonal,
}

/// How full covariances are compared. Both give the same value:
/// `Direct` forms `F×F` matrices, `Gram` uses
/// `‖AᵀA/a − BᵀB/b‖² = ‖AAᵀ‖²/a² − 2‖ABᵀ‖²/(ab) + ‖BBᵀ‖²/b²`
/// and never materializes anything `F×F`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceRoute {
    #[default]
    Auto,
    Direct,
    Gram,
}

/// Budget for precomputed `F×F` targets in the automatic route, in elements.
const DIRECT_BUDGET: usize = 1 << 25;

#[derive(Clone, Debug)]
enum CovTarget<T> {
    Zero,
    Direct(Tensor<T>),
    Gram { centered: Tensor<T>, self_term: f64, divisor: f64 },
    Diagonal(Tensor<T>),
}

/// Precomputed real-graph side of the feature alignment loss.
#[derive(Clone, Debug)]
pub struct FeatureTarget<T> {
    means: Vec<Vec<Tensor<T>>>,
    cov: Vec<Vec<CovTarget<T>>>,
    ratios: Vec<f64>,
    num_features: usize,
}

impl<T: Scalar> FeatureTarget<T> {
    pub fn new(stats: &ClassStats<T>, mode: CovarianceMode, route: CovarianceRoute) -> Result<Self> {
        let f = stats.num_features();
        let direct_fits = stats.num_hops() * stats.num_classes() * f * f <= DIRECT_BUDGET;
        let mut cov = Vec::with_capacity(stats.num_hops());
        for k in 0..stats.num_hops() {
            let mut row = Vec::with_capacity(stats.num_classes());
            for c in 0..stats.num_classes() {
                let a = stats.centered(k, c);
                let n = a.rows();
                let t = if n < 2 {
                    CovTarget::Zero
                } else {
                    match mode {
                        CovarianceMode::Diagonal => {
                            let var = a.hadamard(a)?.mean_rows().scale(T::lit(n as f64 / (n - 1) as f64));
                            CovTarget::Diagonal(var)
                        }
                        CovarianceMode::Full => {
                            let direct = match route {
                                CovarianceRoute::Direct => true,
                                CovarianceRoute::Gram => false,
                                CovarianceRoute::Auto => direct_fits && f <= n,
                            };
                            if direct {
                                CovTarget::Direct(stats.covariance(k, c))
                            } else {
                                let divisor = (n - 1) as f64;
                                let aat = a.matmul(&a.transpose())?;
                                CovTarget::Gram {
                                    centered: a.clone(),
                                    self_term: aat.sq_norm().as_f64() / (divisor * divisor),
                                    divisor,
                                }
                            }
                        }
                    }
                };
                row.push(t);
            }
            cov.push(row);
        }
        Ok(Self {
            means: stats.means.clone(),
            cov,
            ratios: stats.ratios.clone(),
            num_features: f,
        })
    }

    pub fn num_hops(&self) -> usize {
        self.means.len()
    }

    pub fn num_classes(&self) -> usize {
        self.ratios.len()
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }
}

/// The two parts of the feature alignment loss and their combination.
#[derive(Clone, Copy, Debug)]
pub struct FeatureLoss {
    pub mean: Var,
    pub cov: Var,
    pub total: Var,
}

/// `Σ_k Σ_c r_c‖μ − μ′‖² + λ_c Σ_k Σ_c r_c‖U − U′‖²` between a fixed target
/// and condensed hop features `h[k]` with labels `labels`. Condensed classes
/// with a single node contribute no covariance term.
pub fn feature_alignment_on<T: Scalar>(
    tape: &Tape<T>,
    target: &FeatureTarget<T>,
    h: &[Var],
    labels: &[usize],
    lambda_cov: f64,
) -> Result<FeatureLoss> {
    if h.len() != target.num_hops() {
        return Err(Error::dim("feature_alignment", format!("{} hops against {}", h.len(), target.num_hops())));
    }
    let c_total = target.num_classes();
    let all: Vec<usize> = (0..labels.len()).collect();
    let groups = group_by_class(labels, &all, c_total)?;
    let mut mean_terms = Vec::new();
    let mut cov_terms = Vec::new();
    for (k, &hk) in h.iter().enumerate() {
        if tape.shape(hk)[1] != target.num_features {
            return Err(Error::dim(
                "feature_alignment",
                format!("{} features against {}", tape.shape(hk)[1], target.num_features),
            ));
        }
        for (c, g) in groups.iter().enumerate() {
            let r = T::lit(target.ratios[c]);
            let rows = tape.index_rows(hk, g)?;
            let mu = tape.mean_rows(rows)?;
            let mu_t = tape.constant(target.means[k][c].clone());
            let d = tape.sq_norm(tape.sub(mu, mu_t)?)?;
            mean_terms.push(tape.scale(d, r)?);

            let n = g.len();
            if n < 2 {
                continue;
            }
            let b = tape.sub_row(rows, mu)?;
            let bd = T::lit((n - 1) as f64);
            let term = match &target.cov[k][c] {
                CovTarget::Zero => {
                    let gram = if n < target.num_features {
                        tape.matmul_ex(b, false, b, true)?
                    } else {
                        tape.matmul_ex(b, true, b, false)?
                    };
                    tape.scale(tape.sq_norm(gram)?, T::one() / (bd * bd))?
                }
                CovTarget::Direct(u) => {
                    let u_c = tape.scale(tape.matmul_ex(b, true, b, false)?, T::one() / bd)?;
                    tape.sq_norm(tape.sub(u_c, tape.constant(u.clone()))?)?
                }
                CovTarget::Gram { centered, self_term, divisor } => {
                    let a = tape.constant(centered.clone());
                    let ad = T::lit(*divisor);
                    let cross = tape.sq_norm(tape.matmul_ex(a, false, b, true)?)?;
                    let own = tape.sq_norm(tape.matmul_ex(b, false, b, true)?)?;
                    let s = tape.add(
                        tape.scale(cross, T::lit(-2.0) / (ad * bd))?,
                        tape.scale(own, T::one() / (bd * bd))?,
                    )?;
                    tape.add_scalar(s, T::lit(*self_term))?
                }
                CovTarget::Diagonal(var) => {
                    let v = tape.scale(tape.mean_rows(tape.mul(b, b)?)?, T::lit(n as f64) / bd)?;
                    tape.sq_norm(tape.sub(v, tape.constant(var.clone()))?)?
                }
            };
            cov_terms.push(tape.scale(term, r)?);
        }
    }
    let sum = |terms: Vec<Var>| -> Result<Var> {
        let mut it = terms.into_iter();
        match it.next() {
            None => Ok(tape.constant(Tensor::scalar(T::zero()))),
            Some(first) => it.try_fold(first, |acc, t| tape.add(acc, t)),
        }
    };
    let mean = sum(mean_terms)?;
    let cov = sum(cov_terms)?;
    let total = tape.add(mean, tape.scale(cov, T::lit(lambda_cov))?)?;
    Ok(FeatureLoss { mean, cov, total })
}

/// Value of the feature alignment loss between two sets of statistics,
/// weighting classes by the ratios of `real`.
pub fn feature_alignment_loss<T: Scalar>(real: &ClassStats<T>, cond: &ClassStats<T>, lambda_cov: f64) -> Result<f64> {
    if real.num_hops() != cond.num_hops() || real.num_classes() != cond.num_classes() || real.num_features() != cond.num_features() {
        return Err(Error::dim(
            "feature_alignment",
            format!(
                "hops/classes/features {}/{}/{} against {}/{}/{}",
                real.num_hops(),
                real.num_classes(),
                real.num_features(),
                cond.num_hops(),
                cond.num_classes(),
                cond.num_features()
            ),
        ));
    }
    let (mut mean, mut cov) = (0.0, 0.0);
    for k in 0..real.num_hops() {
        for c in 0..real.num_classes() {
            let r = real.ratios()[c];
            mean += r * real.mean(k, c).sub(cond.mean(k, c))?.sq_norm().as_f64();
            if cond.counts()[c] >= 2 {
                cov += r * real.covariance(k, c).sub(&cond.covariance(k, c))?.sq_norm().as_f64();
            }
        }
    }
    Ok(mean + lambda_cov * cov)
}
