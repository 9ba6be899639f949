//! The discretized saddle-point objective and the approximate MFC objective.
//!
//! Sign conventions: the primal step minimizes
//! `Φ_ℓ(θ_ℓ; a) = h Σₖ [L(tₖ, zₖ, θₖ) + aₖᵀζ(zₖ)] + G(z_n)`, and
//! `L_ℓ(a, θ_ℓ) = (h/2) Σₖ aₖᵀK_r⁻¹aₖ − Φ_ℓ(θ_ℓ; a)`.

use rayon::prelude::*;

use crate::costs::{running_cost, running_cost_grad, terminal_cost, terminal_cost_grad};
use crate::dynamics::{euler_rollout, rollout_gradient_with, AdjointWorkspace, Rollout, StageCost};
use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;
use crate::linalg::norm;
use crate::problem::{ControlSchedule, DualCoefficients, ProblemSpec};

/// Running + feature-coupling cost of one agent for fixed per-node weights.
pub(crate) struct AgentCost<'a> {
    pub spec: &'a ProblemSpec,
    /// `n × r` row-major weights multiplying `ζ(zₖ)`.
    pub weights: &'a [f64],
}

impl StageCost for AgentCost<'_> {
    fn stage(&self, k: usize, _t: f64, z: &[f64], theta: &[f64], gz: &mut [f64], gt: &mut [f64]) -> f64 {
        let mut value = running_cost_grad(z, theta, &self.spec.costs, gz, gt);
        let r = self.spec.rank();
        let mut g3 = [0.0; 3];
        value += self
            .spec
            .map
            .contract_with_gradient(&z[..3], &self.weights[k * r..(k + 1) * r], &mut g3);
        for i in 0..3 {
            gz[i] += g3[i];
        }
        value
    }

    fn terminal(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        terminal_cost_grad(z, &self.spec.costs, grad)
    }
}

/// Running cost plus the exact pairwise kernel against fixed positions of
/// the whole population (`N × 3` per node).
struct ExactPairCost<'a> {
    spec: &'a ProblemSpec,
    positions: &'a [Vec<f64>],
}

impl StageCost for ExactPairCost<'_> {
    fn stage(&self, k: usize, _t: f64, z: &[f64], theta: &[f64], gz: &mut [f64], gt: &mut [f64]) -> f64 {
        let mut value = running_cost_grad(z, theta, &self.spec.costs, gz, gt);
        let pts = &self.positions[k];
        let weight = 3.0 / pts.len() as f64;
        for y in pts.chunks_exact(3) {
            value += weight * self.spec.kernel.eval_grad_unchecked(&z[..3], y, weight, &mut gz[..3]);
        }
        value
    }

    fn terminal(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        terminal_cost_grad(z, &self.spec.costs, grad)
    }
}

/// `Φ_ℓ` and its gradient for agent `l`.
pub fn phi_value_grad(
    spec: &ProblemSpec,
    a: &DualCoefficients,
    l: usize,
    theta_l: &[f64],
    grad: &mut [f64],
    ws: &mut AdjointWorkspace,
) -> Result<f64> {
    let cost = AgentCost {
        spec,
        weights: &a.values,
    };
    rollout_gradient_with(&spec.model, spec.initial_state(l), theta_l, &spec.grid, &cost, grad, ws)
        .map_err(|e| relabel_agent(e, l))
}

pub(crate) fn relabel_agent(err: Error, l: usize) -> Error {
    match err {
        Error::RolloutDiverged { step, .. } => Error::RolloutDiverged { agent: l, step },
        other => Error::Agent {
            agent: l,
            source: Box::new(other),
        },
    }
}

fn dual_quadratic(a: &DualCoefficients, map: &FeatureMap, h: f64) -> f64 {
    (0..a.nodes).map(|k| map.kr().quad_inverse(a.node(k))).sum::<f64>() * h / 2.0
}

/// `L_ℓ(a, θ_ℓ)` for a single agent started at `z0_l`.
pub fn per_agent_objective(a: &DualCoefficients, theta_l: &[f64], z0_l: &[f64], spec: &ProblemSpec) -> Result<f64> {
    spec.check_duals(a)?;
    let single = spec.with_initial_states(z0_l.to_vec())?;
    let mut grad = vec![0.0; theta_l.len()];
    let phi = phi_value_grad(&single, a, 0, theta_l, &mut grad, &mut AdjointWorkspace::new())?;
    Ok(dual_quadratic(a, &spec.map, spec.grid.step()) - phi)
}

/// `L(a, θ) = (1/N) Σ_ℓ L_ℓ(a, θ_ℓ)`.
pub fn full_lagrangian(a: &DualCoefficients, theta: &ControlSchedule, spec: &ProblemSpec) -> Result<f64> {
    spec.check_duals(a)?;
    spec.check_controls(theta)?;
    let phis = per_agent_phi(a, theta, spec)?;
    let quad = dual_quadratic(a, &spec.map, spec.grid.step());
    let n = spec.agents() as f64;
    Ok(phis.iter().map(|phi| quad - phi).sum::<f64>() / n)
}

fn per_agent_phi(a: &DualCoefficients, theta: &ControlSchedule, spec: &ProblemSpec) -> Result<Vec<f64>> {
    (0..spec.agents())
        .into_par_iter()
        .map_init(
            || (AdjointWorkspace::new(), vec![0.0; theta.per_agent()]),
            |(ws, g), l| phi_value_grad(spec, a, l, theta.agent(l), g, ws),
        )
        .collect()
}

/// `∇_θ L(a, θ)`, stacked `N × n × q`.
pub fn lagrangian_gradient(a: &DualCoefficients, theta: &ControlSchedule, spec: &ProblemSpec) -> Result<Vec<f64>> {
    spec.check_duals(a)?;
    spec.check_controls(theta)?;
    let scale = -1.0 / spec.agents() as f64;
    let per: Vec<Vec<f64>> = (0..spec.agents())
        .into_par_iter()
        .map_init(AdjointWorkspace::new, |ws, l| {
            let mut g = vec![0.0; theta.per_agent()];
            phi_value_grad(spec, a, l, theta.agent(l), &mut g, ws)?;
            g.iter_mut().for_each(|v| *v *= scale);
            Ok(g)
        })
        .collect::<Result<_>>()?;
    Ok(per.concat())
}

/// Per-node `cₖ = (1/N) Σ_ℓ ζ(z_ℓ(tₖ))`, row-major `n × r`.
pub fn mean_features_along(rollout: &Rollout, map: &FeatureMap) -> Vec<f64> {
    let r = map.rank();
    let mut c = vec![0.0; rollout.nodes * r];
    let mut buf = vec![0.0; r];
    for k in 0..rollout.nodes {
        let ck = &mut c[k * r..(k + 1) * r];
        for l in 0..rollout.agents {
            map.evaluate_into(&rollout.state(l, k)[..3], &mut buf);
            for (a, b) in ck.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        ck.iter_mut().for_each(|v| *v /= rollout.agents as f64);
    }
    c
}

/// `K_r cₖ` for every node.
fn coupled_weights(c: &[f64], map: &FeatureMap) -> Vec<f64> {
    let r = map.rank();
    let mut out = vec![0.0; c.len()];
    for (ck, ok) in c.chunks_exact(r).zip(out.chunks_exact_mut(r)) {
        map.kr().apply(ck, ok);
    }
    out
}

/// `J_r(θ)` evaluated on an existing rollout.
fn jr_from_rollout(rollout: &Rollout, theta: &ControlSchedule, spec: &ProblemSpec) -> f64 {
    let h = spec.grid.step();
    let n_agents = rollout.agents as f64;
    let c = mean_features_along(rollout, &spec.map);
    let r = spec.rank();
    let q = spec.control_dim();
    let mut running = 0.0;
    let mut terminal = 0.0;
    for l in 0..rollout.agents {
        let th = theta.agent(l);
        for k in 0..rollout.nodes {
            running += running_cost(spec.grid.time(k), rollout.state(l, k), &th[k * q..(k + 1) * q], &spec.costs);
        }
        terminal += terminal_cost(rollout.terminal(l), &spec.costs);
    }
    let interaction: f64 = c.chunks_exact(r).map(|ck| 0.5 * spec.map.kr().quad(ck)).sum();
    h * running / n_agents + h * interaction + terminal / n_agents
}

/// The approximate MFC objective
/// `h Σₖ (1/N) Σ_ℓ L + h Σₖ ½ cₖᵀK_r cₖ + (1/N) Σ_ℓ G`.
pub fn objective_jr(theta: &ControlSchedule, spec: &ProblemSpec) -> Result<f64> {
    spec.check_controls(theta)?;
    let rollout = euler_rollout(&spec.model, spec.initial_states(), theta, &spec.grid)?;
    Ok(jr_from_rollout(&rollout, theta, spec))
}

/// How the coupled objective evaluates the interaction term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InteractionMode {
    /// `½ cᵀK_r c`, `O(N·r)` per node.
    Features,
    /// Exact Gaussian double sum, `O(N²)` per node.
    ExactKernel,
}

/// Value and exact gradient of `J_r`. The interaction term contributes
/// `h (∂ζ/∂z)ᵀ K_r cₖ / N` to each agent's state gradient at node k.
pub fn objective_jr_gradient(theta: &ControlSchedule, spec: &ProblemSpec) -> Result<(f64, Vec<f64>)> {
    coupled_objective_gradient(theta, spec, InteractionMode::Features)
}

pub fn coupled_objective_gradient(
    theta: &ControlSchedule,
    spec: &ProblemSpec,
    mode: InteractionMode,
) -> Result<(f64, Vec<f64>)> {
    spec.check_controls(theta)?;
    let rollout = euler_rollout(&spec.model, spec.initial_states(), theta, &spec.grid)?;
    let inv_n = 1.0 / spec.agents() as f64;
    let per: Vec<Vec<f64>> = match mode {
        InteractionMode::Features => {
            let c = mean_features_along(&rollout, &spec.map);
            let weights = coupled_weights(&c, &spec.map);
            let cost = AgentCost {
                spec,
                weights: &weights,
            };
            per_agent_adjoint(spec, theta, &cost, inv_n)?
        }
        InteractionMode::ExactKernel => {
            let positions: Vec<Vec<f64>> = (0..rollout.nodes).map(|k| rollout.positions_at(k)).collect();
            let cost = ExactPairCost {
                spec,
                positions: &positions,
            };
            per_agent_adjoint(spec, theta, &cost, inv_n)?
        }
    };
    let value = match mode {
        InteractionMode::Features => jr_from_rollout(&rollout, theta, spec),
        InteractionMode::ExactKernel => exact_objective_from_rollout(&rollout, theta, spec)?,
    };
    Ok((value, per.concat()))
}

fn per_agent_adjoint<C: StageCost + Sync>(
    spec: &ProblemSpec,
    theta: &ControlSchedule,
    cost: &C,
    scale: f64,
) -> Result<Vec<Vec<f64>>> {
    (0..spec.agents())
        .into_par_iter()
        .map_init(AdjointWorkspace::new, |ws, l| {
            let mut g = vec![0.0; theta.per_agent()];
            rollout_gradient_with(
                &spec.model,
                spec.initial_state(l),
                theta.agent(l),
                &spec.grid,
                cost,
                &mut g,
                ws,
            )
            .map_err(|e| relabel_agent(e, l))?;
            g.iter_mut().for_each(|v| *v *= scale);
            Ok(g)
        })
        .collect()
}

fn exact_objective_from_rollout(rollout: &Rollout, theta: &ControlSchedule, spec: &ProblemSpec) -> Result<f64> {
    use crate::costs::{interaction_direct, KernelEvaluator};
    let h = spec.grid.step();
    let n_agents = rollout.agents as f64;
    let q = spec.control_dim();
    let mut running = 0.0;
    let mut terminal = 0.0;
    for l in 0..rollout.agents {
        let th = theta.agent(l);
        for k in 0..rollout.nodes {
            running += running_cost(spec.grid.time(k), rollout.state(l, k), &th[k * q..(k + 1) * q], &spec.costs);
        }
        terminal += terminal_cost(rollout.terminal(l), &spec.costs);
    }
    let mut interaction = 0.0;
    for k in 0..rollout.nodes {
        interaction += interaction_direct(&rollout.positions_at(k), KernelEvaluator::Exact(&spec.kernel))?;
    }
    Ok(h * running / n_agents + h * interaction + terminal / n_agents)
}

/// `maxₖ ‖aₖ − K_r cₖ‖` (reduces to `‖aₖ − cₖ‖` for `K_r = I`).
pub fn dual_residual_max(a: &DualCoefficients, rollout: &Rollout, map: &FeatureMap) -> f64 {
    let c = mean_features_along(rollout, map);
    let target = coupled_weights(&c, map);
    let r = map.rank();
    (0..a.nodes)
        .map(|k| {
            let ak = a.node(k);
            let tk = &target[k * r..(k + 1) * r];
            ak.iter().zip(tk).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoppingStatus {
    pub primal_grad_norm: f64,
    pub dual_residual_max: f64,
    pub jr_grad_norm: f64,
    pub jr_value: f64,
    pub primal_ok: bool,
    pub dual_ok: bool,
    pub mfc_ok: bool,
}

impl StoppingStatus {
    pub fn all(&self) -> bool {
        self.primal_ok && self.dual_ok && self.mfc_ok
    }
}

/// The three optimality criteria at `(θ, a)`.
pub fn stopping_check(
    theta: &ControlSchedule,
    a: &DualCoefficients,
    spec: &ProblemSpec,
    eps: f64,
) -> Result<StoppingStatus> {
    let primal = norm(&lagrangian_gradient(a, theta, spec)?);
    let rollout = euler_rollout(&spec.model, spec.initial_states(), theta, &spec.grid)?;
    Ok(stopping_status_with(primal, a, &rollout, theta, spec, eps)?)
}

pub(crate) fn stopping_status_with(
    primal_grad_norm: f64,
    a: &DualCoefficients,
    rollout: &Rollout,
    theta: &ControlSchedule,
    spec: &ProblemSpec,
    eps: f64,
) -> Result<StoppingStatus> {
    let dual = dual_residual_max(a, rollout, &spec.map);
    let (jr_value, jr_grad) = objective_jr_gradient(theta, spec)?;
    let jr_norm = norm(&jr_grad);
    Ok(StoppingStatus {
        primal_grad_norm,
        dual_residual_max: dual,
        jr_grad_norm: jr_norm,
        jr_value,
        primal_ok: primal_grad_norm <= eps,
        dual_ok: dual < eps,
        mfc_ok: jr_norm < eps,
    })
}
