//! Similarity distribution matching and the contrastive discrimination term.

use crate::autodiff::{Tape, Var};
use crate::condense::stats_groups;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Class means of embedding rows, one row per class.
pub fn prototypes<T: Scalar>(z: &Tensor<T>, labels: &[usize], num_classes: usize) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let zv = tape.constant(z.clone());
    let p = prototypes_on(&tape, zv, labels, num_classes)?;
    Ok(tape.value(p))
}

pub fn prototypes_on<T: Scalar>(tape: &Tape<T>, z: Var, labels: &[usize], num_classes: usize) -> Result<Var> {
    if labels.len() != tape.shape(z)[0] {
        return Err(Error::dim("prototypes", format!("{} labels for {} rows", labels.len(), tape.shape(z)[0])));
    }
    let groups = stats_groups(labels, num_classes)?;
    let rows = groups
        .iter()
        .map(|g| tape.mean_rows(tape.index_rows(z, g)?))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

fn check_temperature(name: &str, t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} temperature must be positive, got {t}")))
    }
}

/// `s_i[c] = exp(cos(z_i, p_c) / τ)`; a zero-norm row gives cosine 0.
pub fn similarity_embedding<T: Scalar>(z: &Tensor<T>, prototypes: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let (zv, pv) = (tape.constant(z.clone()), tape.constant(prototypes.clone()));
    let s = similarity_embedding_on(&tape, zv, pv, temperature)?;
    Ok(tape.value(s))
}

pub fn similarity_embedding_on<T: Scalar>(tape: &Tape<T>, z: Var, prototypes: Var, temperature: f64) -> Result<Var> {
    check_temperature("similarity", temperature)?;
    let cos = tape.cosine_similarity(z, prototypes)?;
    tape.exp(tape.scale(cos, T::lit(1.0 / temperature))?)
}

/// Per-class means of similarity rows; the fixed side of the matching loss.
pub fn class_means<T: Scalar>(s: &Tensor<T>, labels: &[usize], num_classes: usize) -> Result<Vec<Tensor<T>>> {
    if labels.len() != s.rows() {
        return Err(Error::dim("class_means", format!("{} labels for {} rows", labels.len(), s.rows())));
    }
    stats_groups(labels, num_classes)?
        .iter()
        .map(|g| Ok(s.select_rows(g)?.mean_rows()))
        .collect()
}

/// `Σ_c r_c ‖mean_c(S_r) − mean_c(S′)‖²`.
pub fn sdm_loss<T: Scalar>(
    s_real: &Tensor<T>,
    labels_real: &[usize],
    s_cond: &Tensor<T>,
    labels_cond: &[usize],
    ratios: &[f64],
) -> Result<f64> {
    let c = ratios.len();
    let target = class_means(s_real, labels_real, c)?;
    let tape = Tape::new();
    let sv = tape.constant(s_cond.clone());
    let l = sdm_loss_on(&tape, &target, sv, labels_cond, ratios)?;
    Ok(tape.scalar_value(l)?.as_f64())
}

pub fn sdm_loss_on<T: Scalar>(tape: &Tape<T>, target: &[Tensor<T>], s_cond: Var, labels_cond: &[usize], ratios: &[f64]) -> Result<Var> {
    let c = ratios.len();
    if target.len() != c {
        return Err(Error::dim("sdm", format!("{} target classes for {c} ratios", target.len())));
    }
    if tape.shape(s_cond)[0] != labels_cond.len() {
        return Err(Error::dim("sdm", format!("{} labels for {} rows", labels_cond.len(), tape.shape(s_cond)[0])));
    }
    let groups = stats_groups(labels_cond, c)?;
    let mut total: Option<Var> = None;
    for ((g, t), &r) in groups.iter().zip(target).zip(ratios) {
        let mean = tape.mean_rows(tape.index_rows(s_cond, g)?)?;
        let d = tape.sq_norm(tape.sub(mean, tape.constant(t.clone()))?)?;
        let term = tape.scale(d, T::lit(r))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::dim("sdm", "no classes"))
}

/// Supervised contrastive regularizer. For each node `i` with same-label
/// peers `S(i)` (itself excluded), averages over `p ∈ S(i)` the ratio
/// `exp(cos(z_i, z_p)/τ) / Σ_{q≠i} exp(cos(z_i, z_q)/τ)` and negates the sum
/// over nodes. With `log_form` the log of each ratio is averaged instead.
/// Nodes without peers contribute nothing.
pub fn cdr_loss<T: Scalar>(z: &Tensor<T>, labels: &[usize], temperature: f64, log_form: bool) -> Result<f64> {
    let tape = Tape::new();
    let zv = tape.constant(z.clone());
    let l = cdr_loss_on(&tape, zv, labels, temperature, log_form)?;
    Ok(tape.scalar_value(l)?.as_f64())
}

pub fn cdr_loss_on<T: Scalar>(tape: &Tape<T>, z: Var, labels: &[usize], temperature: f64, log_form: bool) -> Result<Var> {
    check_temperature("contrastive", temperature)?;
    let n = tape.shape(z)[0];
    if labels.len() != n {
        return Err(Error::dim("cdr", format!("{} labels for {n} rows", labels.len())));
    }
    if n < 2 {
        return Err(Error::dim("cdr", "needs at least two nodes"));
    }
    // Positive weights 1/|S(i)| on same-label off-diagonal pairs.
    let mut weights = vec![T::zero(); n * n];
    let mut lonely = 0;
    for i in 0..n {
        let peers: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if peers.is_empty() {
            lonely += 1;
            continue;
        }
        let w = T::one() / T::lit(peers.len() as f64);
        for j in peers {
            weights[i * n + j] = w;
        }
    }
    if lonely > 0 {
        log::warn!("{lonely} condensed nodes have no same-class peer and are left out of the contrastive term");
    }
    let weights = tape.constant(Tensor::new(n, n, weights)?);
    let off_diag = tape.constant(Tensor::full(n, n, T::one()).sub(&Tensor::identity(n))?);

    let logits = tape.scale(tape.cosine_similarity(z, z)?, T::lit(1.0 / temperature))?;
    let e = tape.mul(tape.exp(logits)?, off_diag)?;
    let denom = tape.sum_cols(e)?;
    let per_pair = if log_form {
        let log_denom = tape.broadcast_cols(tape.log(denom)?, n)?;
        tape.sub(logits, log_denom)?
    } else {
        let inv = tape.broadcast_cols(tape.powf(denom, -T::one())?, n)?;
        tape.mul(e, inv)?
    };
    tape.scale(tape.sum(tape.mul(per_pair, weights)?)?, -T::one())
}
