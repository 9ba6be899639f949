#![allow(dead_code)]

use kernel_mfc::config::RunConfig;
use kernel_mfc::linalg::SpdMatrix;
use kernel_mfc::problem::{ControlSchedule, DualCoefficients, ProblemSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Small double integrator; `alpha1` sets the coupling strength.
pub fn di_config(agents: usize, nodes: usize, alpha1: f64, alpha2: f64) -> RunConfig {
    let mut cfg = RunConfig::desk_double_integrator();
    cfg.problem.agents = agents;
    cfg.problem.nodes = nodes;
    cfg.problem.horizon = 2.0;
    cfg.kernel.alpha1 = alpha1;
    cfg.costs.alpha2 = alpha2;
    cfg.costs.alpha3 = 10.0;
    cfg.features.rank = 16;
    cfg
}

pub fn quad_config(agents: usize, nodes: usize, alpha1: f64) -> RunConfig {
    let mut cfg = RunConfig::desk_quadrotor();
    cfg.problem.agents = agents;
    cfg.problem.nodes = nodes;
    cfg.problem.horizon = 1.5;
    cfg.kernel.alpha1 = alpha1;
    cfg.costs.alpha3 = 10.0;
    cfg.features.rank = 16;
    cfg
}

pub fn spec_of(cfg: &RunConfig) -> ProblemSpec {
    cfg.problem_spec().expect("valid test configuration")
}

pub fn random_controls(spec: &ProblemSpec, rng: &mut ChaCha8Rng, std: f64) -> ControlSchedule {
    let mut theta = spec.empty_controls();
    for v in theta.values.iter_mut() {
        *v = std * normal(rng);
    }
    theta
}

pub fn random_duals(spec: &ProblemSpec, rng: &mut ChaCha8Rng, std: f64) -> DualCoefficients {
    let values = (0..spec.grid.nodes * spec.rank()).map(|_| std * normal(rng)).collect();
    DualCoefficients::from_values(spec, values).unwrap()
}

/// `B Bᵀ + shift·I` with Gaussian `B`.
pub fn random_spd(r: usize, rng: &mut ChaCha8Rng, shift: f64) -> SpdMatrix {
    let b: Vec<f64> = (0..r * r).map(|_| normal(rng)).collect();
    let rows: Vec<Vec<f64>> = (0..r)
        .map(|i| {
            (0..r)
                .map(|j| {
                    let s: f64 = (0..r).map(|k| b[i * r + k] * b[j * r + k]).sum();
                    s / r as f64 + if i == j { shift } else { 0.0 }
                })
                .collect()
        })
        .collect();
    SpdMatrix::from_rows(&rows).unwrap()
}

pub fn uniform_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..3 * n).map(|_| rng.random_range(-3.0..3.0)).collect()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

/// Dense matrix as row vectors.
pub fn dense(m: &SpdMatrix) -> Vec<Vec<f64>> {
    m.rows()
}

/// Conjugate gradients on `A x = b` for a symmetric positive-definite `A`
/// given as a closure.
pub fn conjugate_gradient<F: Fn(&[f64]) -> Vec<f64>>(apply: F, b: &[f64], tol: f64) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let b_norm = rr.sqrt().max(1e-300);
    for _ in 0..10 * n + 50 {
        if rr.sqrt() <= tol * b_norm {
            break;
        }
        let ap = apply(&p);
        let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        for i in 0..n {
            p[i] = r[i] + rr_new / rr * p[i];
        }
        rr = rr_new;
    }
    x
}

pub fn mat_vec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}
