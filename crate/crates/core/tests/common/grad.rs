//! Reverse-mode gradients of every condensation and transfer loss against
//! central finite differences on small random instances. Each check returns
//! the error of every case it ran.

use super::{labels, randn, rng};
use rand::Rng;
use tcgu_core::condense::{
    class_stats, feature_alignment_on, logits_alignment_on, propagate, CovarianceMode, CovarianceRoute, FeatureTarget,
    TopologyMlp,
};
use tcgu_core::gnn::{normalize_dense_on_tape, GnnKind, GnnModel, GnnSpec, PropVar, Propagator};
use tcgu_core::transfer::{
    cdr_loss_on, class_means, prototypes_on, sdm_loss_on, similarity_embedding, similarity_embedding_on, prototypes,
    transfer_loss_on, TransferConfig, TransferObjective,
};
use tcgu_core::{finite_diff_check, Tape, Tensor};

pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
const DRAWS: u64 = 5;

/// Random sizes within N ≤ 20, F ≤ 8, C ≤ 4.
fn sizes(seed: u64) -> (usize, usize, usize) {
    let mut r = rng(seed ^ 0x5eed);
    let c = r.random_range(2..=4);
    let n = r.random_range(2 * c..=20);
    let f = r.random_range(2..=8);
    (n, f, c)
}

/// A random symmetric weighted adjacency with entries in (0, 1).
fn random_adjacency(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Tensor<f64> {
    let u = Tensor::<f64>::uniform(n, n, 0.05, 0.95, r);
    u.add(&u.transpose()).unwrap().scale(0.5)
}

/// Feature target built from a random real graph with `c` classes.
fn real_target(seed: u64, f: usize, c: usize, hops: usize, route: CovarianceRoute) -> FeatureTarget<f64> {
    let mut r = rng(seed);
    let n = 6 * c;
    let y = labels(&mut r, n, c, 2);
    let a = random_adjacency(&mut r, n);
    let prop = Propagator::from_dense_adjacency(&a, 1.0).unwrap();
    let h = propagate(&prop, &randn(&mut r, n, f), hops).unwrap();
    FeatureTarget::new(&class_stats(&h, &y, c).unwrap(), CovarianceMode::Full, route).unwrap()
}

pub fn feature_alignment_terms() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for s in 0..DRAWS {
        let (n, f, c) = sizes(s);
        for route in [CovarianceRoute::Direct, CovarianceRoute::Gram] {
            let target = real_target(s + 100, f, c, 2, route);
            let mut r = rng(s);
            let y = labels(&mut r, n, c, 2);
            let a = random_adjacency(&mut r, n);
            let x = randn(&mut r, n, f);
            for part in ["mean", "cov", "total"] {
                let err = finite_diff_check(
                    |t, v| {
                        let p = normalize_dense_on_tape(t, v[1], 1.0)?;
                        let h = tcgu_core::condense::propagate_on(t, PropVar::Dense(p), v[0], 2)?;
                        let l = feature_alignment_on(t, &target, &h, &y, 0.5)?;
                        Ok(match part {
                            "mean" => l.mean,
                            "cov" => l.cov,
                            _ => l.total,
                        })
                    },
                    &[x.clone(), a.clone()],
                    EPS,
                )
                .unwrap();
                out.push((format!("feature {part} {route:?} draw {s}"), err));
            }
        }
    }
    out
}

pub fn logits_alignment() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for s in 0..DRAWS {
        let (n, f, c) = sizes(s);
        let mut r = rng(s);
        let y = labels(&mut r, n, c, 1);
        for kind in [GnnKind::Sgc, GnnKind::Gcn] {
            let spec = GnnSpec { hidden: 5, ..GnnSpec::new(kind) };
            let teacher = GnnModel::<f64>::init(spec, f, c, s).unwrap();
            let err = finite_diff_check(
                |t, v| {
                    let p = normalize_dense_on_tape(t, v[1], 1.0)?;
                    logits_alignment_on(t, &teacher, PropVar::Dense(p), v[0], &y, c)
                },
                &[randn(&mut r, n, f), random_adjacency(&mut r, n)],
                EPS,
            )
            .unwrap();
            out.push((format!("logits {kind} draw {s}"), err));
        }
    }
    out
}

pub fn similarity_matching() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for s in 0..DRAWS {
        let (n, f, c) = sizes(s);
        let mut r = rng(s);
        let y = labels(&mut r, n, c, 1);
        let real_y = labels(&mut r, 3 * c, c, 1);
        let real_z = randn(&mut r, 3 * c, f);
        let target = class_means(&similarity_embedding(&real_z, &prototypes(&real_z, &real_y, c).unwrap(), 0.5).unwrap(), &real_y, c).unwrap();
        let ratios: Vec<f64> = (0..c).map(|k| (k + 1) as f64).map(|w| w / (c * (c + 1) / 2) as f64).collect();
        let err = finite_diff_check(
            |t, v| {
                let p = prototypes_on(t, v[0], &y, c)?;
                let sim = similarity_embedding_on(t, v[0], p, 0.5)?;
                sdm_loss_on(t, &target, sim, &y, &ratios)
            },
            &[randn(&mut r, n, f)],
            EPS,
        )
        .unwrap();
        out.push((format!("sdm draw {s}"), err));
    }
    out
}

pub fn contrastive_regularizer_both_forms() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for s in 0..DRAWS {
        let (n, f, c) = sizes(s);
        let mut r = rng(s);
        let y = labels(&mut r, n, c, 2);
        let z = randn(&mut r, n, f);
        for log_form in [false, true] {
            let err = finite_diff_check(|t, v| cdr_loss_on(t, v[0], &y, 0.5, log_form), &[z.clone()], EPS).unwrap();
            out.push((format!("cdr log={log_form} draw {s}"), err));
        }
    }
    out
}

pub fn full_transfer_objective_wrt_residual_and_topology() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for s in 0..DRAWS {
        let (n, f, c) = sizes(s);
        let mut r = rng(s);
        let y = labels(&mut r, n, c, 2);
        let hops = 2;
        let target = real_target(s + 200, f, c, hops, CovarianceRoute::Auto);
        let model = GnnModel::<f64>::init(GnnSpec { hidden: 6, ..GnnSpec::new(GnnKind::Gcn) }, f, c, s).unwrap();
        let real_y = labels(&mut r, 3 * c, c, 1);
        let real_z = randn(&mut r, 3 * c, model.embedding_dim());
        let sim_target =
            class_means(&similarity_embedding(&real_z, &prototypes(&real_z, &real_y, c).unwrap(), 0.5).unwrap(), &real_y, c)
                .unwrap();
        let ratios = target.ratios().to_vec();
        let config = TransferConfig { lambda_feat: 1.0, lambda_cdr: 0.5, lambda_cov: 0.1, ..TransferConfig::default() };
        let objective = TransferObjective {
            model: &model,
            similarity_target: &sim_target,
            feature_target: &target,
            labels: &y,
            ratios: &ratios,
            hops,
            w_loop: 1.0,
            config: &config,
        };
        let topo = TopologyMlp::<f64>::init(f, 4, s).unwrap();
        let x = randn(&mut r, n, f);
        let mut inputs = vec![Tensor::randn(n, 2, 0.3, &mut r), Tensor::randn(2, f, 0.3, &mut r)];
        inputs.extend(topo.params().iter().cloned());
        let err = finite_diff_check(
            |t, v| {
                let xv = t.constant(x.clone());
                Ok(transfer_loss_on(t, &objective, xv, v[0], v[1], &v[2..])?.total)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        out.push((format!("transfer draw {s}"), err));
    }
    out
}

pub fn fused_pair_and_dense_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for s in 0..DRAWS {
        let mut r = rng(s);
        let (n, h) = (r.random_range(2..=6), r.random_range(1..=4));
        let inputs = [randn(&mut r, n, h), randn(&mut r, n, h), randn(&mut r, 1, h), randn(&mut r, h, 3), randn(&mut r, 1, 3)];
        let err = finite_diff_check(
            |t: &Tape<f64>, v| {
                let pairs = t.pair_hidden(v[0], v[1], v[2])?;
                let summed = t.pair_sum(v[0], v[1])?;
                let out = t.dense(pairs, v[3], v[4], true)?;
                let lin = t.dense(summed, v[3], v[4], false)?;
                t.add(t.sq_norm(out)?, t.sum(t.sigmoid(lin)?)?)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        out.push((format!("fused draw {s}"), err));
    }
    out
}

pub fn condensation_objective_wrt_features_and_topology() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    use tcgu_core::condense::{condense_forward, CondenseConfig};
    for s in 0..DRAWS {
        let (n, f, c) = sizes(s);
        let mut r = rng(s);
        let y = labels(&mut r, n, c, 2);
        let config = CondenseConfig { lambda_feat: 1.0, lambda_cov: 0.1, ..CondenseConfig::default() };
        let target = real_target(s + 300, f, c, config.hops, CovarianceRoute::Auto);
        let teacher = GnnModel::<f64>::init(GnnSpec { hidden: 5, ..GnnSpec::new(GnnKind::Gcn) }, f, c, s).unwrap();
        let topo = TopologyMlp::<f64>::init(f, 4, s).unwrap();
        let mut inputs = vec![randn(&mut r, n, f)];
        inputs.extend(topo.params().iter().cloned());
        let err = finite_diff_check(
            |t, v| Ok(condense_forward(t, &teacher, &target, &v[1..], v[0], &y, c, &config)?.total),
            &inputs,
            EPS,
        )
        .unwrap();
        out.push((format!("condensation draw {s}"), err));
    }
    out
}

pub fn classification_loss_wrt_weights() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for s in 0..DRAWS {
        let (n, f, c) = sizes(s);
        let mut r = rng(s);
        let y = labels(&mut r, n, c, 1);
        let a = random_adjacency(&mut r, n);
        let x = randn(&mut r, n, f);
        for kind in [GnnKind::Sgc, GnnKind::Gcn] {
            let model = GnnModel::<f64>::init(GnnSpec { hidden: 5, ..GnnSpec::new(kind) }, f, c, s).unwrap();
            let err = finite_diff_check(
                |t, v| {
                    let p = normalize_dense_on_tape(t, t.constant(a.clone()), 1.0)?;
                    let logits = model.forward_on(t, v, PropVar::Dense(p), t.constant(x.clone()), None)?.logits;
                    t.cross_entropy(logits, &y)
                },
                &model.params(),
                EPS,
            )
            .unwrap();
            out.push((format!("classification {kind} draw {s}"), err));
        }
    }
    out
}

/// Every check, by loss.
pub fn all() -> Vec<(&'static str, Vec<(String, f64)>)> {
    vec![
        ("feature_alignment_terms", feature_alignment_terms()),
        ("logits_alignment", logits_alignment()),
        ("similarity_matching", similarity_matching()),
        ("contrastive_regularizer_both_forms", contrastive_regularizer_both_forms()),
        ("full_transfer_objective_wrt_residual_and_topology", full_transfer_objective_wrt_residual_and_topology()),
        ("fused_pair_and_dense_ops", fused_pair_and_dense_ops()),
        ("condensation_objective_wrt_features_and_topology", condensation_objective_wrt_features_and_topology()),
        ("classification_loss_wrt_weights", classification_loss_wrt_weights()),
    ]
}
