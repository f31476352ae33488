//! Direct, loop-based oracles for the statistics and loss primitives. Each
//! `*_gap` runs the primitive and its oracle on random instances and returns
//! the largest discrepancy `|value − oracle| / (1 + |oracle|)`.

use super::{cosine, labels, mean_of, members, randn, rng, rows, sq_dist};
use rand::Rng;
use tcgu_core::condense::{class_stats, feature_alignment_on, CovarianceMode, CovarianceRoute, FeatureTarget};
use tcgu_core::transfer::{cdr_loss, prototypes, sdm_loss, similarity_embedding};
use tcgu_core::{Tape, Tensor};

pub const TOL: f64 = 1e-10;
pub const INSTANCES: u64 = 20;

fn gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

fn row_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| gap(*x, *y)).fold(0.0, f64::max)
}

/// Sample covariance `Σ (x−μ)(x−μ)ᵀ / (n−1)` as a flat row-major vector;
/// zero for fewer than two rows.
pub fn covariance(rows: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let f = rows[0].len();
    let mu = mean_of(rows, idx);
    let mut u = vec![0.0; f * f];
    if idx.len() < 2 {
        return u;
    }
    for &i in idx {
        for a in 0..f {
            for b in 0..f {
                u[a * f + b] += (rows[i][a] - mu[a]) * (rows[i][b] - mu[b]);
            }
        }
    }
    u.iter().map(|v| v / (idx.len() - 1) as f64).collect()
}

/// Random rows with labels; every class has at least `min_per_class` rows.
pub fn instance(seed: u64, min_per_class: usize) -> (Tensor<f64>, Vec<usize>, usize) {
    let mut r = rng(seed);
    let c = r.random_range(2..=4);
    let base = c * min_per_class.max(1);
    let n = r.random_range(base + 1..=base + 12);
    let f = r.random_range(1..=6);
    (randn(&mut r, n, f), labels(&mut r, n, c, min_per_class), c)
}

pub fn class_stats_gap() -> f64 {
    let mut worst = 0.0f64;
    for s in 0..INSTANCES {
        let mut r = rng(s + 1000);
        let (x0, y, c) = instance(s, 1);
        let hops = vec![x0.clone(), randn(&mut r, x0.rows(), x0.cols())];
        let stats = class_stats(&hops, &y, c).unwrap();
        for (k, h) in hops.iter().enumerate() {
            let h = rows(h);
            for class in 0..c {
                let idx = members(&y, class);
                worst = worst.max(row_gap(stats.mean(k, class).data(), &mean_of(&h, &idx)));
                worst = worst.max(row_gap(stats.covariance(k, class).data(), &covariance(&h, &idx)));
            }
        }
        let ratios: Vec<f64> = (0..c).map(|k| members(&y, k).len() as f64 / y.len() as f64).collect();
        worst = worst.max(row_gap(stats.ratios(), &ratios));
    }
    worst
}

/// `Σ_k Σ_c r_c ‖μ − μ′‖² + λ Σ_k Σ_c r_c ‖U − U′‖²`, ratios from the real side;
/// condensed classes of one node have no covariance term.
fn feature_loss_oracle(real: &[Vec<Vec<f64>>], ry: &[usize], cond: &[Vec<Vec<f64>>], cy: &[usize], c: usize, lambda: f64) -> f64 {
    let mut total = 0.0;
    for (h, g) in real.iter().zip(cond) {
        for class in 0..c {
            let (ri, ci) = (members(ry, class), members(cy, class));
            let r = ri.len() as f64 / ry.len() as f64;
            total += r * sq_dist(&mean_of(h, &ri), &mean_of(g, &ci));
            if ci.len() >= 2 {
                total += lambda * r * sq_dist(&covariance(h, &ri), &covariance(g, &ci));
            }
        }
    }
    total
}

/// Feature alignment through the direct, Gram and automatic covariance routes.
pub fn feature_alignment_gap() -> f64 {
    let mut worst = 0.0f64;
    for s in 0..INSTANCES {
        let (xr, ry, c) = instance(s, 2);
        let mut r = rng(s + 2000);
        let hr = vec![xr.clone(), randn(&mut r, xr.rows(), xr.cols())];
        let n = r.random_range(c..=c + 6);
        let cy = labels(&mut r, n, c, 1);
        let hc = vec![randn(&mut r, n, xr.cols()), randn(&mut r, n, xr.cols())];
        let oracle = feature_loss_oracle(
            &hr.iter().map(rows).collect::<Vec<_>>(),
            &ry,
            &hc.iter().map(rows).collect::<Vec<_>>(),
            &cy,
            c,
            0.3,
        );
        let stats = class_stats(&hr, &ry, c).unwrap();
        for route in [CovarianceRoute::Direct, CovarianceRoute::Gram, CovarianceRoute::Auto] {
            let target = FeatureTarget::new(&stats, CovarianceMode::Full, route).unwrap();
            let tape = Tape::new();
            let vars: Vec<_> = hc.iter().map(|h| tape.constant(h.clone())).collect();
            let l = feature_alignment_on(&tape, &target, &vars, &cy, 0.3).unwrap();
            worst = worst.max(gap(tape.scalar_value(l.total).unwrap(), oracle));
        }
    }
    worst
}

pub fn prototypes_gap() -> f64 {
    let mut worst = 0.0f64;
    for s in 0..INSTANCES {
        let (z, y, c) = instance(s, 1);
        let p = prototypes(&z, &y, c).unwrap();
        let zr = rows(&z);
        for class in 0..c {
            worst = worst.max(row_gap(p.row(class), &mean_of(&zr, &members(&y, class))));
        }
    }
    worst
}

pub fn similarity_gap() -> f64 {
    let mut worst = 0.0f64;
    for s in 0..INSTANCES {
        let (z, y, c) = instance(s, 1);
        let p = prototypes(&z, &y, c).unwrap();
        let tau = 0.2 + s as f64 * 0.05;
        let sim = similarity_embedding(&z, &p, tau).unwrap();
        let (zr, pr) = (rows(&z), rows(&p));
        for (i, zi) in zr.iter().enumerate() {
            let want: Vec<f64> = pr.iter().map(|pc| (cosine(zi, pc) / tau).exp()).collect();
            worst = worst.max(row_gap(sim.row(i), &want));
        }
    }
    worst
}

pub fn sdm_gap() -> f64 {
    let mut worst = 0.0f64;
    for s in 0..INSTANCES {
        let (sr, ry, c) = instance(s, 1);
        let sr = sr.map(f64::exp);
        let mut r = rng(s + 3000);
        let n = r.random_range(c..=c + 6);
        let cy = labels(&mut r, n, c, 1);
        let sc = randn(&mut r, n, sr.cols()).map(f64::exp);
        let ratios: Vec<f64> = (0..c).map(|k| members(&ry, k).len() as f64 / ry.len() as f64).collect();
        let (srr, scr) = (rows(&sr), rows(&sc));
        let oracle: f64 =
            (0..c).map(|k| ratios[k] * sq_dist(&mean_of(&srr, &members(&ry, k)), &mean_of(&scr, &members(&cy, k)))).sum();
        worst = worst.max(gap(sdm_loss(&sr, &ry, &sc, &cy, &ratios).unwrap(), oracle));
    }
    worst
}

/// Direct sum over nodes and peers, denominators over every other node.
pub fn cdr_oracle(z: &[Vec<f64>], y: &[usize], tau: f64, log_form: bool) -> f64 {
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let peers: Vec<usize> = (0..n).filter(|&p| p != i && y[p] == y[i]).collect();
        if peers.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&q| q != i).map(|q| (cosine(&z[i], &z[q]) / tau).exp()).sum();
        let mut acc = 0.0;
        for &p in &peers {
            let ratio = (cosine(&z[i], &z[p]) / tau).exp() / denom;
            acc += if log_form { ratio.ln() } else { ratio };
        }
        total += acc / peers.len() as f64;
    }
    -total
}

/// Both forms; singleton classes may occur and must drop out in both.
pub fn cdr_gap() -> f64 {
    let mut worst = 0.0f64;
    for s in 0..INSTANCES {
        let (z, y, _) = instance(s, 1);
        let tau = 0.3 + 0.05 * s as f64;
        for log_form in [false, true] {
            worst = worst.max(gap(cdr_loss(&z, &y, tau, log_form).unwrap(), cdr_oracle(&rows(&z), &y, tau, log_form)));
        }
    }
    worst
}

/// Every comparison, by primitive.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("class_stats", class_stats_gap()),
        ("feature_alignment", feature_alignment_gap()),
        ("prototypes", prototypes_gap()),
        ("similarity_embedding", similarity_gap()),
        ("sdm_loss", sdm_gap()),
        ("cdr_loss", cdr_gap()),
    ]
}
