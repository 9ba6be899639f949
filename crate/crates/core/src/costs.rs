//! Running, terminal and obstacle costs, and the interaction evaluators.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_map::{FeatureMap, KernelSpec};
use crate::linalg::dot;

/// Axis-aligned box carrying a Gaussian density that is active only inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub mean: [f64; 3],
    /// Diagonal of the covariance.
    pub cov_diag: [f64; 3],
}

impl ObstacleBox {
    pub fn contains(&self, x: &[f64]) -> bool {
        (0..3).all(|i| self.lo[i] <= x[i] && x[i] <= self.hi[i])
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let det: f64 = self.cov_diag.iter().product();
        let m: f64 = (0..3).map(|i| (x[i] - self.mean[i]).powi(2) / self.cov_diag[i]).sum();
        (2.0 * PI).powf(-1.5) * det.powf(-0.5) * (-0.5 * m).exp()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleField {
    pub boxes: Vec<ObstacleBox>,
}

impl ObstacleField {
    pub fn empty() -> Self {
        ObstacleField { boxes: Vec::new() }
    }

    /// The two-pillar course of the double-integrator experiment.
    pub fn two_pillars() -> Self {
        ObstacleField {
            boxes: vec![
                ObstacleBox {
                    lo: [-2.0, -0.5, 0.0],
                    hi: [2.0, 0.5, 7.0],
                    mean: [0.0, 0.0, 2.0],
                    cov_diag: [9.0, 3.0, 9.0],
                },
                ObstacleBox {
                    lo: [2.0, -1.0, 0.0],
                    hi: [4.0, 1.0, 4.0],
                    mean: [2.5, 0.0, 2.0],
                    cov_diag: [9.0, 3.0, 3.0],
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            if (0..3).any(|j| !(b.lo[j] <= b.hi[j])) {
                return Err(Error::Argument(format!("obstacle box {i} has lo > hi")));
            }
            if b.cov_diag.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Argument(format!("obstacle box {i} has non-positive covariance")));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

pub fn obstacle_q(x: &[f64], field: &ObstacleField) -> f64 {
    field
        .boxes
        .iter()
        .filter(|b| b.contains(x))
        .map(|b| b.density(x))
        .sum()
}

/// Q(x), accumulating `weight·∇Q(x)` into `grad`. On and inside a box the
/// density gradient is used; outside every box the gradient is zero.
pub fn obstacle_q_grad(x: &[f64], field: &ObstacleField, weight: f64, grad: &mut [f64]) -> f64 {
    let mut value = 0.0;
    for b in field.boxes.iter().filter(|b| b.contains(x)) {
        let p = b.density(x);
        value += p;
        for i in 0..3 {
            grad[i] -= weight * p * (x[i] - b.mean[i]) / b.cov_diag[i];
        }
    }
    value
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub alpha2: f64,
    pub alpha3: f64,
    pub target: Vec<f64>,
    #[serde(default)]
    pub obstacles: ObstacleField,
}

impl CostSpec {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if !(self.alpha2 >= 0.0 && self.alpha3 >= 0.0) {
            return Err(Error::Argument("alpha2 and alpha3 must be >= 0".into()));
        }
        if self.target.len() != state_dim {
            return Err(Error::Argument(format!(
                "target has {} entries, state dimension is {state_dim}",
                self.target.len()
            )));
        }
        self.obstacles.validate()
    }
}

/// `‖θ‖² + α₂ Q(z₀..₃)`
pub fn running_cost(_t: f64, z: &[f64], theta: &[f64], spec: &CostSpec) -> f64 {
    let mut value = dot(theta, theta);
    if spec.alpha2 != 0.0 {
        value += spec.alpha2 * obstacle_q(&z[..3], &spec.obstacles);
    }
    value
}

/// Running cost with gradients; `grad_z` and `grad_theta` are overwritten.
pub fn running_cost_grad(z: &[f64], theta: &[f64], spec: &CostSpec, grad_z: &mut [f64], grad_theta: &mut [f64]) -> f64 {
    grad_z.fill(0.0);
    for (g, t) in grad_theta.iter_mut().zip(theta) {
        *g = 2.0 * t;
    }
    let mut value = dot(theta, theta);
    if spec.alpha2 != 0.0 {
        value += spec.alpha2 * obstacle_q_grad(&z[..3], &spec.obstacles, spec.alpha2, grad_z);
    }
    value
}

/// `(α₃/2)‖z_T − target‖²` over the full state.
pub fn terminal_cost(z_t: &[f64], spec: &CostSpec) -> f64 {
    0.5 * spec.alpha3 * z_t.iter().zip(&spec.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

pub fn terminal_cost_grad(z_t: &[f64], spec: &CostSpec, grad: &mut [f64]) -> f64 {
    for ((g, a), b) in grad.iter_mut().zip(z_t).zip(&spec.target) {
        *g = spec.alpha3 * (a - b);
    }
    terminal_cost(z_t, spec)
}

/// Which pairwise kernel `interaction_direct` sums.
#[derive(Clone, Copy, Debug)]
pub enum KernelEvaluator<'a> {
    Exact(&'a KernelSpec),
    /// `ζ(x)ᵀ K_r ζ(y)`
    Expanded(&'a FeatureMap),
}

fn check_positions(positions: &[f64]) -> Result<usize> {
    if positions.is_empty() || positions.len() % 3 != 0 {
        return Err(Error::Argument("positions must be a non-empty N x 3 array".into()));
    }
    Ok(positions.len() / 3)
}

/// `(1/2N²) Σ_ℓ Σ_m K(x_ℓ, x_m)`, diagonal included, accumulated in index order.
pub fn interaction_direct(positions: &[f64], kernel: KernelEvaluator<'_>) -> Result<f64> {
    let n = check_positions(positions)?;
    let mut total = 0.0;
    match kernel {
        KernelEvaluator::Exact(spec) => {
            for x in positions.chunks_exact(3) {
                for y in positions.chunks_exact(3) {
                    total += spec.eval_unchecked(x, y);
                }
            }
        }
        KernelEvaluator::Expanded(map) => {
            let r = map.rank();
            let mut feats = vec![0.0; n * r];
            let mut kfeats = vec![0.0; n * r];
            for (x, (f, kf)) in positions
                .chunks_exact(3)
                .zip(feats.chunks_exact_mut(r).zip(kfeats.chunks_exact_mut(r)))
            {
                map.evaluate_into(x, f);
                map.kr().apply(f, kf);
            }
            for f in feats.chunks_exact(r) {
                for kf in kfeats.chunks_exact(r) {
                    total += dot(f, kf);
                }
            }
        }
    }
    Ok(total / (2.0 * (n * n) as f64))
}

/// `(1/N) Σ_ℓ ζ(x_ℓ)`
pub fn mean_features(positions: &[f64], map: &FeatureMap) -> Result<Vec<f64>> {
    let n = check_positions(positions)?;
    let r = map.rank();
    let mut mean = vec![0.0; r];
    let mut buf = vec![0.0; r];
    for x in positions.chunks_exact(3) {
        map.evaluate_into(x, &mut buf);
        for (m, b) in mean.iter_mut().zip(&buf) {
            *m += b;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok(mean)
}

/// `½ cᵀ K_r c` with `c = mean_features(positions)`, in `O(N·r + r²)`.
pub fn interaction_features(positions: &[f64], map: &FeatureMap) -> Result<f64> {
    let c = mean_features(positions, map)?;
    Ok(0.5 * map.kr().quad(&c))
}
