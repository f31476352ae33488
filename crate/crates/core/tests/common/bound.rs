//! Brute-force evaluation of the feature-alignment bound on the class-wise
//! gradient-matching objective of a linear (SGC) relay with squared loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Mat = Vec<Vec<f64>>;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, shift: f64) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n).map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect()).collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn lincomb(a: &Mat, x: f64, b: &Mat, y: f64) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(u, v)| x * u + y * v).collect()).collect()
}

fn sq_norm(a: &Mat) -> f64 {
    a.iter().flatten().map(|v| v * v).sum()
}

/// One-hot rows of class `c` for `n` nodes.
pub fn one_hot(n: usize, c: usize, classes: usize) -> Mat {
    (0..n).map(|_| (0..classes).map(|j| if j == c { 1.0 } else { 0.0 }).collect()).collect()
}

pub struct Instance {
    pub real: Vec<Mat>,
    pub cond: Vec<Mat>,
    pub theta: Mat,
    pub classes: usize,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = super::rng(seed);
    let f = rng.random_range(4..=8);
    let classes = rng.random_range(2..=4);
    let real = (0..classes)
        .map(|c| {
            let n = rng.random_range(2..=8);
            random(&mut rng, n, f, c as f64)
        })
        .collect();
    let cond = (0..classes)
        .map(|c| {
            let n = rng.random_range(1..=4);
            random(&mut rng, n, f, c as f64)
        })
        .collect();
    let theta = random(&mut rng, f, classes, 0.0);
    Instance { real, cond, theta, classes }
}

/// Σ_c ‖ (1/|C_c|) ∇_Θ L_c(H) − (1/|C'_c|) ∇_Θ L_c(H') ‖², with
/// L_c = ½‖H_c Θ − Y_c‖².
pub fn gradient_matching(inst: &Instance) -> f64 {
    let grad = |h: &Mat, c: usize| {
        let y = one_hot(h.len(), c, inst.classes);
        let residual = lincomb(&matmul(h, &inst.theta), 1.0, &y, -1.0);
        let g = matmul(&transpose(h), &residual);
        let n = h.len() as f64;
        g.into_iter().map(|r| r.into_iter().map(|v| v / n).collect()).collect::<Mat>()
    };
    (0..inst.classes)
        .map(|c| sq_norm(&lincomb(&grad(&inst.real[c], c), 1.0, &grad(&inst.cond[c], c), -1.0)))
        .sum()
}

/// Σ_c ‖ (1/|C_c|) H_cᵀY_c − (1/|C'_c|) H'_cᵀY'_c ‖²
///   + Σ_c ‖ (1/|C_c|) H_cᵀH_c − (1/|C'_c|) H'_cᵀH'_c ‖² · ‖Θ‖².
pub fn alignment_bound(inst: &Instance) -> f64 {
    let theta = sq_norm(&inst.theta);
    (0..inst.classes)
        .map(|c| {
            let (h, g) = (&inst.real[c], &inst.cond[c]);
            let (n, m) = (h.len() as f64, g.len() as f64);
            let hy = matmul(&transpose(h), &one_hot(h.len(), c, inst.classes));
            let gy = matmul(&transpose(g), &one_hot(g.len(), c, inst.classes));
            let mean = sq_norm(&lincomb(&hy, 1.0 / n, &gy, -1.0 / m));
            let second = sq_norm(&lincomb(&matmul(&transpose(h), h), 1.0 / n, &matmul(&transpose(g), g), -1.0 / m));
            mean + second * theta
        })
        .sum()
}

/// Violations of the bound over `draws` instances, beyond a 1e-9 slack.
pub fn violations(draws: u64) -> Vec<(u64, f64, f64)> {
    (0..draws)
        .filter_map(|s| {
            let inst = instance(s);
            let (gm, bound) = (gradient_matching(&inst), alignment_bound(&inst));
            (gm > bound + 1e-9).then_some((s, gm, bound))
        })
        .collect()
}

