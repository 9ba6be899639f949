//! Finite-difference checks of the adjoint gradients on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::costs::{CostSpec, ObstacleField};
use crate::dynamics::{AdjointWorkspace, DynamicsModel, TimeGrid};
use crate::error::Result;
use crate::feature_map::{rff_features, KernelSpec};
use crate::objective::{objective_jr, objective_jr_gradient, per_agent_objective, phi_value_grad};
use crate::problem::{ControlSchedule, DualCoefficients, InitialDistribution, ProblemSpec};

/// Central differences of `f` at `x` with a per-coordinate relative step.
pub fn central_difference<F: FnMut(&[f64]) -> Result<f64>>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖b‖, tiny)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub label: String,
    pub rel_error: f64,
}

/// A random instance with `N ≤ 3` agents and `n ≤ 10` nodes.
pub fn random_instance(model: DynamicsModel, rng: &mut ChaCha8Rng) -> Result<(ProblemSpec, ControlSchedule, DualCoefficients)> {
    let agents = rng.random_range(1..=3);
    let nodes = rng.random_range(3..=10);
    let horizon = rng.random_range(0.5..2.0);
    let d = model.state_dim();
    let mut target = vec![0.0; d];
    for t in target.iter_mut().take(3) {
        *t = rng.random_range(-2.0..2.0);
    }
    let obstacles = match model {
        DynamicsModel::DoubleIntegrator => ObstacleField::two_pillars(),
        DynamicsModel::Quadrotor { .. } => ObstacleField::empty(),
    };
    let costs = CostSpec {
        alpha2: rng.random_range(0.0..50.0),
        alpha3: rng.random_range(0.5..5.0),
        target,
        obstacles,
    };
    let kernel = KernelSpec::gaussian(rng.random_range(0.5..5.0))?;
    let map = rff_features(&kernel, rng.random_range(3..=12), rng.random())?;
    let mut mean = vec![0.0; d];
    mean[1] = -0.5;
    let init = InitialDistribution {
        mean,
        variance: 0.8,
        random_coords: (0..d).collect(),
        seed: rng.random(),
    };
    let grid = TimeGrid::new(horizon, nodes)?;
    let spec = ProblemSpec::new(model, grid, costs, map, kernel, init, agents)?;
    let mut theta = spec.empty_controls();
    for v in theta.values.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = 0.5 * z;
    }
    if let DynamicsModel::Quadrotor { gravity, mass } = model {
        for th in theta.values.chunks_exact_mut(4) {
            th[0] += mass * gravity;
        }
    }
    let mut a = DualCoefficients::zeros(&spec);
    for v in a.values.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z;
    }
    Ok((spec, theta, a))
}

/// Checks `∇_θ L_ℓ` and `∇J_r` against central differences on `instances`
/// random problems per dynamics model.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for model in [DynamicsModel::DoubleIntegrator, DynamicsModel::quadrotor()] {
        let name = match model {
            DynamicsModel::DoubleIntegrator => "double_integrator",
            DynamicsModel::Quadrotor { .. } => "quadrotor",
        };
        for i in 0..instances {
            let (spec, theta, a) = random_instance(model, &mut rng)?;
            let l = rng.random_range(0..spec.agents());
            let z0 = spec.initial_state(l).to_vec();
            let theta_l = theta.agent(l).to_vec();
            let mut adj = vec![0.0; theta_l.len()];
            phi_value_grad(&spec, &a, l, &theta_l, &mut adj, &mut AdjointWorkspace::new())?;
            // L_ℓ = quadratic(a) − Φ_ℓ
            adj.iter_mut().for_each(|g| *g = -*g);
            let fd = central_difference(|x| per_agent_objective(&a, x, &z0, &spec), &theta_l, 1e-6)?;
            out.push(GradCheck {
                label: format!("{name}/{i}/per_agent_objective"),
                rel_error: relative_error(&adj, &fd),
            });

            let (_, jr_grad) = objective_jr_gradient(&theta, &spec)?;
            let shape = (theta.agents, theta.nodes, theta.control_dim);
            let fd = central_difference(
                |x| {
                    let th = ControlSchedule::from_values(x.to_vec(), shape.0, shape.1, shape.2)?;
                    objective_jr(&th, &spec)
                },
                &theta.values,
                1e-6,
            )?;
            out.push(GradCheck {
                label: format!("{name}/{i}/objective_jr"),
                rel_error: relative_error(&jr_grad, &fd),
            });
        }
    }
    Ok(out)
}
