//! Primal-dual iterations, the closed-form proximal dual step, and the
//! coupled baseline that minimizes `J_r` over all controls jointly.

use std::ops::ControlFlow;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{euler_rollout, AdjointWorkspace, Rollout, TimeGrid};
use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;
use crate::objective::{
    coupled_objective_gradient, mean_features_along, phi_value_grad, stopping_status_with, InteractionMode,
    StoppingStatus,
};
use crate::optim::{minimize_phased, minimize_with, OptimizerOptions};
use crate::problem::{ControlSchedule, DualCoefficients, IterationRecord, ProblemSpec, SolveHistory};

/// Which criteria end the outer loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Primal gradient, dual residual and `J_r` gradient all below tolerance.
    #[default]
    All,
    /// Only the `J_r` gradient norm.
    JrOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrimalDualOptions {
    /// Proximal parameter; the dual step is `h·gamma`. `None` picks the
    /// `gamma` giving a dual step of 0.5.
    pub gamma: Option<f64>,
    /// Inner phases run in order on every agent.
    pub inner: Vec<OptimizerOptions>,
    pub max_outer_iters: usize,
    pub eps_tol: f64,
    pub seed: u64,
    /// Standard deviation of the random initial controls and coefficients.
    pub init_std: f64,
    pub stop_rule: StopRule,
}

impl Default for PrimalDualOptions {
    fn default() -> Self {
        PrimalDualOptions {
            gamma: None,
            inner: vec![OptimizerOptions::lbfgs(250, 1e-3), OptimizerOptions::gradient_descent(750, 1e-3)],
            max_outer_iters: 50,
            eps_tol: 0.5,
            seed: 0,
            init_std: 0.1,
            stop_rule: StopRule::All,
        }
    }
}

impl PrimalDualOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Argument(format!("gamma must be > 0, got {g}")));
            }
        }
        if !(self.eps_tol > 0.0) {
            return Err(Error::Argument("eps_tol must be > 0".into()));
        }
        if self.inner.is_empty() {
            return Err(Error::Argument("at least one inner optimizer phase is required".into()));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Argument("init_std must be >= 0".into()));
        }
        for o in &self.inner {
            o.validate()?;
        }
        Ok(())
    }

    pub fn dual_step(&self, grid: &TimeGrid) -> f64 {
        match self.gamma {
            Some(g) => grid.step() * g,
            None => 0.5,
        }
    }

    pub fn gamma_for(&self, grid: &TimeGrid) -> f64 {
        self.dual_step(grid) / grid.step()
    }
}

/// Controls drawn i.i.d. `N(0, std²)` from `seed`; shared by both solvers so
/// that they start from the same point.
pub fn initial_controls(spec: &ProblemSpec, seed: u64, std: f64) -> ControlSchedule {
    let mut theta = spec.empty_controls();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in theta.values.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = std * z;
    }
    theta
}

fn initial_duals(spec: &ProblemSpec, seed: u64, std: f64) -> DualCoefficients {
    let mut a = DualCoefficients::zeros(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0a1_5eed);
    for v in a.values.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = std * z;
    }
    a
}

/// Outcome of one parallel primal sweep.
#[derive(Clone, Debug)]
pub struct PrimalOutcome {
    pub theta: ControlSchedule,
    /// `‖∇_θ L‖ = (1/N)·sqrt(Σ_ℓ ‖∇Φ_ℓ‖²)` at the returned controls.
    pub grad_norm: f64,
    /// Agents whose inner solve reached its gradient tolerance.
    pub converged_agents: usize,
    pub line_search_failures: usize,
}

/// Minimizes every `Φ_ℓ(·; a)` independently, warm-started at `theta`.
pub fn primal_update(
    a: &DualCoefficients,
    theta: &ControlSchedule,
    spec: &ProblemSpec,
    inner: &[OptimizerOptions],
) -> Result<PrimalOutcome> {
    spec.check_duals(a)?;
    spec.check_controls(theta)?;
    let results: Vec<_> = (0..spec.agents())
        .into_par_iter()
        .map(|l| {
            let mut ws = AdjointWorkspace::new();
            let f = |x: &[f64], g: &mut [f64]| phi_value_grad(spec, a, l, x, g, &mut ws);
            minimize_phased(f, theta.agent(l).to_vec(), inner).map_err(|e| match e {
                e @ (Error::Agent { .. } | Error::RolloutDiverged { .. }) => e,
                other => Error::Agent {
                    agent: l,
                    source: Box::new(other),
                },
            })
        })
        .collect::<Result<_>>()?;
    let mut out = theta.clone();
    let mut sq = 0.0;
    let mut converged = 0;
    let mut failures = 0;
    for (l, res) in results.into_iter().enumerate() {
        out.agent_mut(l).copy_from_slice(&res.x);
        sq += res.grad_norm * res.grad_norm;
        converged += res.converged as usize;
        failures += res.line_search_failures;
    }
    Ok(PrimalOutcome {
        theta: out,
        grad_norm: sq.sqrt() / spec.agents() as f64,
        converged_agents: converged,
        line_search_failures: failures,
    })
}

/// Closed-form proximal step `a' = (I + h_a K_r⁻¹)⁻¹ (a + h_a c)` with
/// `h_a = h·gamma`, node by node.
pub fn dual_update(
    a: &DualCoefficients,
    rollout: &Rollout,
    map: &FeatureMap,
    grid: &TimeGrid,
    gamma: f64,
) -> Result<DualCoefficients> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Argument(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    if rollout.nodes != a.nodes || map.rank() != a.rank || grid.nodes != a.nodes {
        return Err(Error::Argument("rollout, map and coefficients disagree in shape".into()));
    }
    let c = mean_features_along(rollout, map);
    dual_update_with_means(a, &c, map, grid.step() * gamma)
}

/// Same step for given per-node feature means `c` (`n × r`) and dual step `h_a`.
pub fn dual_update_with_means(a: &DualCoefficients, c: &[f64], map: &FeatureMap, h_a: f64) -> Result<DualCoefficients> {
    if c.len() != a.values.len() {
        return Err(Error::Argument("feature means do not match n x r".into()));
    }
    let solver = map.kr().shifted_solver(h_a)?;
    let r = a.rank;
    let mut out = a.clone();
    let mut rhs = vec![0.0; r];
    for k in 0..a.nodes {
        for ((o, ak), ck) in rhs.iter_mut().zip(a.node(k)).zip(&c[k * r..(k + 1) * r]) {
            *o = ak + h_a * ck;
        }
        solver.solve(&rhs, out.node_mut(k));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PrimalDualResult {
    pub theta: ControlSchedule,
    pub a: DualCoefficients,
    pub history: SolveHistory,
    pub converged: bool,
    pub rollout: Rollout,
    pub status: Option<StoppingStatus>,
    /// Seconds from start until the stop rule first held.
    pub time_to_threshold: Option<f64>,
}

impl PrimalDualResult {
    pub fn outer_iterations(&self) -> usize {
        self.history.len()
    }
}

pub fn primal_dual_solve(spec: &ProblemSpec, opts: &PrimalDualOptions) -> Result<PrimalDualResult> {
    primal_dual_solve_with(spec, opts, |_| {})
}

/// Alternates primal sweeps and dual steps. `progress` sees each record.
///
/// The stopping test pairs the new controls with the coefficients they were
/// optimized against; on success those coefficients are returned.
pub fn primal_dual_solve_with<P: FnMut(&IterationRecord)>(
    spec: &ProblemSpec,
    opts: &PrimalDualOptions,
    mut progress: P,
) -> Result<PrimalDualResult> {
    opts.validate()?;
    let start = Instant::now();
    let gamma = opts.gamma_for(&spec.grid);
    let mut theta = initial_controls(spec, opts.seed, opts.init_std);
    let mut a = initial_duals(spec, opts.seed, opts.init_std);
    let mut rollout = euler_rollout(&spec.model, spec.initial_states(), &theta, &spec.grid)?;
    let mut history = SolveHistory::default();
    let mut status = None;
    let mut converged = false;
    for iter in 1..=opts.max_outer_iters {
        let primal = primal_update(&a, &theta, spec, &opts.inner)?;
        theta = primal.theta;
        rollout = euler_rollout(&spec.model, spec.initial_states(), &theta, &spec.grid)?;
        let s = stopping_status_with(primal.grad_norm, &a, &rollout, &theta, spec, opts.eps_tol)?;
        let record = IterationRecord {
            iter,
            primal_grad_norm: s.primal_grad_norm,
            dual_residual_max: s.dual_residual_max,
            jr_grad_norm: s.jr_grad_norm,
            jr_value: s.jr_value,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        progress(&record);
        history.push(record);
        let done = match opts.stop_rule {
            StopRule::All => s.all(),
            StopRule::JrOnly => s.mfc_ok,
        };
        status = Some(s);
        if done {
            converged = true;
            break;
        }
        a = dual_update(&a, &rollout, &spec.map, &spec.grid, gamma)?;
    }
    let time_to_threshold = converged.then(|| history.last().map(|r| r.wall_clock_s)).flatten();
    Ok(PrimalDualResult {
        theta,
        a,
        history,
        converged,
        rollout,
        status,
        time_to_threshold,
    })
}

#[derive(Clone, Debug)]
pub struct PrimalOnlyResult {
    pub theta: ControlSchedule,
    pub rollout: Rollout,
    pub grad_norm: f64,
    /// Every agent reached its inner gradient tolerance.
    pub converged: bool,
}

/// Decoupled solve for fixed coefficients `a`, started from the seeded
/// initial controls. This is the only work needed to reuse stored `a*`.
pub fn solve_primal_only(
    spec: &ProblemSpec,
    a: &DualCoefficients,
    inner: &[OptimizerOptions],
    seed: u64,
    init_std: f64,
) -> Result<PrimalOnlyResult> {
    let theta = initial_controls(spec, seed, init_std);
    let out = primal_update(a, &theta, spec, inner)?;
    let rollout = euler_rollout(&spec.model, spec.initial_states(), &out.theta, &spec.grid)?;
    Ok(PrimalOnlyResult {
        converged: out.converged_agents == spec.agents(),
        theta: out.theta,
        rollout,
        grad_norm: out.grad_norm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoupledOptions {
    pub optimizer: OptimizerOptions,
    /// Use the exact `O(N²)` kernel instead of the feature expansion.
    pub exact_kernel: bool,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for CoupledOptions {
    fn default() -> Self {
        CoupledOptions {
            optimizer: OptimizerOptions::lbfgs(2000, 0.5),
            exact_kernel: false,
            seed: 0,
            init_std: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoupledResult {
    pub theta: ControlSchedule,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Only the `J_r` columns are meaningful; the others hold NaN.
    pub history: SolveHistory,
    pub time_to_threshold: Option<f64>,
}

/// Minimizes the coupled objective over the whole `N × n × q` schedule.
pub fn coupled_solve(spec: &ProblemSpec, opts: &CoupledOptions) -> Result<CoupledResult> {
    let mode = if opts.exact_kernel {
        InteractionMode::ExactKernel
    } else {
        InteractionMode::Features
    };
    let theta0 = initial_controls(spec, opts.seed, opts.init_std);
    let shape = (theta0.agents, theta0.nodes, theta0.control_dim);
    let start = Instant::now();
    let mut history = SolveHistory::default();
    let f = |x: &[f64], g: &mut [f64]| -> Result<f64> {
        let th = ControlSchedule {
            values: x.to_vec(),
            agents: shape.0,
            nodes: shape.1,
            control_dim: shape.2,
        };
        let (v, grad) = coupled_objective_gradient(&th, spec, mode)?;
        g.copy_from_slice(&grad);
        Ok(v)
    };
    // The J_r gradient scales every agent block by 1/N, matching the
    // Lagrangian gradient reported by the primal-dual solver.
    let res = minimize_with(f, theta0.values, &opts.optimizer, |info| {
        history.push(IterationRecord {
            iter: info.iteration,
            primal_grad_norm: f64::NAN,
            dual_residual_max: f64::NAN,
            jr_grad_norm: info.grad_norm,
            jr_value: info.value,
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
        ControlFlow::Continue(())
    })?;
    let time_to_threshold = history
        .records
        .iter()
        .find(|r| r.jr_grad_norm <= opts.optimizer.grad_tol)
        .map(|r| r.wall_clock_s);
    Ok(CoupledResult {
        theta: ControlSchedule {
            values: res.x,
            agents: shape.0,
            nodes: shape.1,
            control_dim: shape.2,
        },
        value: res.value,
        grad_norm: res.grad_norm,
        iterations: res.iterations,
        converged: res.converged,
        history,
        time_to_threshold,
    })
}
