//! Agent dynamics, explicit Euler rollouts and adjoint gradients.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_finite, Error, Result};
use crate::problem::ControlSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsModel {
    /// State `(x, y, z, vx, vy, vz)`, control = accelerations.
    DoubleIntegrator,
    /// State `(x, y, z, ψ, θ, φ, vx, vy, vz, vψ, vθ, vφ)`,
    /// control `(u, τψ, τθ, τφ)`.
    Quadrotor { mass: f64, gravity: f64 },
}

impl DynamicsModel {
    pub fn quadrotor() -> Self {
        DynamicsModel::Quadrotor {
            mass: 1.0,
            gravity: 9.81,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            DynamicsModel::DoubleIntegrator => 6,
            DynamicsModel::Quadrotor { .. } => 12,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            DynamicsModel::DoubleIntegrator => 3,
            DynamicsModel::Quadrotor { .. } => 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DynamicsModel::Quadrotor { mass, gravity } = *self {
            if !(mass > 0.0 && mass.is_finite() && gravity > 0.0 && gravity.is_finite()) {
                return Err(Error::Argument(format!(
                    "quadrotor needs mass > 0 and gravity > 0, got m={mass}, g={gravity}"
                )));
            }
        }
        Ok(())
    }

    /// `out = f(t, z, θ)`
    pub fn rhs(&self, _t: f64, z: &[f64], theta: &[f64], out: &mut [f64]) {
        match *self {
            DynamicsModel::DoubleIntegrator => {
                out[..3].copy_from_slice(&z[3..6]);
                out[3..6].copy_from_slice(&theta[..3]);
            }
            DynamicsModel::Quadrotor { mass, gravity } => {
                out[..6].copy_from_slice(&z[6..12]);
                let (spsi, cpsi) = z[3].sin_cos();
                let (sth, cth) = z[4].sin_cos();
                let (sphi, cphi) = z[5].sin_cos();
                let thrust = theta[0] / mass;
                out[6] = thrust * (sphi * spsi + cphi * cpsi * sth);
                out[7] = thrust * (-cpsi * sphi + cphi * sth * spsi);
                out[8] = thrust * cth * cphi - gravity;
                out[9..12].copy_from_slice(&theta[1..4]);
            }
        }
    }

    /// Writes `(∂f/∂z)ᵀλ` into `out_z` and `(∂f/∂θ)ᵀλ` into `out_theta`.
    pub fn vjp(&self, z: &[f64], theta: &[f64], lambda: &[f64], out_z: &mut [f64], out_theta: &mut [f64]) {
        match *self {
            DynamicsModel::DoubleIntegrator => {
                out_z[..3].iter_mut().for_each(|v| *v = 0.0);
                out_z[3..6].copy_from_slice(&lambda[..3]);
                out_theta[..3].copy_from_slice(&lambda[3..6]);
            }
            DynamicsModel::Quadrotor { mass, .. } => {
                let (spsi, cpsi) = z[3].sin_cos();
                let (sth, cth) = z[4].sin_cos();
                let (sphi, cphi) = z[5].sin_cos();
                let thrust = theta[0] / mass;
                let (lx, ly, lz) = (lambda[6], lambda[7], lambda[8]);

                let ax = sphi * spsi + cphi * cpsi * sth;
                let ay = -cpsi * sphi + cphi * sth * spsi;
                let az = cth * cphi;
                // ∂/∂ψ, ∂/∂θ, ∂/∂φ of (ax, ay, az)
                let ax_psi = sphi * cpsi - cphi * spsi * sth;
                let ay_psi = spsi * sphi + cphi * sth * cpsi;
                let ax_th = cphi * cpsi * cth;
                let ay_th = cphi * cth * spsi;
                let az_th = -sth * cphi;
                let ax_phi = cphi * spsi - sphi * cpsi * sth;
                let ay_phi = -cpsi * cphi - sphi * sth * spsi;
                let az_phi = -cth * sphi;

                out_z[..3].iter_mut().for_each(|v| *v = 0.0);
                out_z[3] = thrust * (lx * ax_psi + ly * ay_psi);
                out_z[4] = thrust * (lx * ax_th + ly * ay_th + lz * az_th);
                out_z[5] = thrust * (lx * ax_phi + ly * ay_phi + lz * az_phi);
                out_z[6..12].copy_from_slice(&lambda[..6]);

                out_theta[0] = (lx * ax + ly * ay + lz * az) / mass;
                out_theta[1..4].copy_from_slice(&lambda[9..12]);
            }
        }
    }
}

pub fn double_integrator_rhs(t: f64, z: &[f64; 6], theta: &[f64; 3]) -> [f64; 6] {
    let mut out = [0.0; 6];
    DynamicsModel::DoubleIntegrator.rhs(t, z, theta, &mut out);
    out
}

pub fn quadrotor_rhs(t: f64, z: &[f64; 12], theta: &[f64; 4], mass: f64, gravity: f64) -> [f64; 12] {
    let mut out = [0.0; 12];
    DynamicsModel::Quadrotor { mass, gravity }.rhs(t, z, theta, &mut out);
    out
}

/// Uniform grid `0 = t₁ < … < t_n = T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub horizon: f64,
    pub nodes: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, nodes: usize) -> Result<Self> {
        let grid = TimeGrid { horizon, nodes };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes < 2 || !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Argument(format!(
                "time grid needs n >= 2 and T > 0, got n={}, T={}",
                self.nodes, self.horizon
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.horizon / (self.nodes - 1) as f64
    }

    /// Node time, zero-based: `time(0) = 0`, `time(n−1) = T`.
    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / (self.nodes - 1) as f64
    }

    pub fn fingerprint(&self) -> String {
        let text = format!("grid:T={:?};n={}", self.horizon, self.nodes);
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// State trajectories, row-major `N × n × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub states: Vec<f64>,
    pub agents: usize,
    pub nodes: usize,
    pub state_dim: usize,
}

impl Rollout {
    pub fn agent(&self, l: usize) -> &[f64] {
        let len = self.nodes * self.state_dim;
        &self.states[l * len..(l + 1) * len]
    }

    pub fn state(&self, l: usize, k: usize) -> &[f64] {
        let d = self.state_dim;
        &self.agent(l)[k * d..(k + 1) * d]
    }

    pub fn terminal(&self, l: usize) -> &[f64] {
        self.state(l, self.nodes - 1)
    }

    /// Spatial positions of all agents at node `k`, flattened `N × 3`.
    pub fn positions_at(&self, k: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.agents * 3);
        for l in 0..self.agents {
            out.extend_from_slice(&self.state(l, k)[..3]);
        }
        out
    }
}

/// Euler recursion for a single agent into `out` (`n × d`).
/// `Err(step)` reports the first step producing a non-finite state.
pub(crate) fn rollout_agent_into(
    model: &DynamicsModel,
    z0: &[f64],
    theta: &[f64],
    grid: &TimeGrid,
    out: &mut [f64],
) -> std::result::Result<(), usize> {
    let d = model.state_dim();
    let q = model.control_dim();
    let h = grid.step();
    out[..d].copy_from_slice(z0);
    let mut f = [0.0; 12];
    for k in 0..grid.nodes - 1 {
        let (done, rest) = out.split_at_mut((k + 1) * d);
        let zk = &done[k * d..];
        model.rhs(grid.time(k), zk, &theta[k * q..(k + 1) * q], &mut f[..d]);
        let next = &mut rest[..d];
        let mut finite = true;
        for i in 0..d {
            next[i] = zk[i] + h * f[i];
            finite &= next[i].is_finite();
        }
        if !finite {
            return Err(k + 1);
        }
    }
    Ok(())
}

pub fn euler_rollout(
    model: &DynamicsModel,
    z0: &[f64],
    theta: &ControlSchedule,
    grid: &TimeGrid,
) -> Result<Rollout> {
    let d = model.state_dim();
    if z0.len() % d != 0 {
        return Err(Error::Argument(format!("initial states must be N x {d}")));
    }
    let agents = z0.len() / d;
    if theta.agents != agents || theta.nodes != grid.nodes || theta.control_dim != model.control_dim() {
        return Err(Error::Argument(format!(
            "control schedule is {}x{}x{}, expected {agents}x{}x{}",
            theta.agents,
            theta.nodes,
            theta.control_dim,
            grid.nodes,
            model.control_dim()
        )));
    }
    ensure_finite(z0, "initial states")?;
    let mut states = vec![0.0; agents * grid.nodes * d];
    for (l, out) in states.chunks_mut(grid.nodes * d).enumerate() {
        rollout_agent_into(model, &z0[l * d..(l + 1) * d], theta.agent(l), grid, out)
            .map_err(|step| Error::RolloutDiverged { agent: l, step })?;
    }
    Ok(Rollout {
        states,
        agents,
        nodes: grid.nodes,
        state_dim: d,
    })
}

/// Per-node running cost and terminal cost of one agent's trajectory.
///
/// The discrete objective is `h·Σₖ stage(k) + terminal(z_n)`, summed over all
/// `n` nodes.
pub trait StageCost {
    /// Returns the stage value and *overwrites* `grad_z`, `grad_theta`.
    fn stage(&self, k: usize, t: f64, z: &[f64], theta: &[f64], grad_z: &mut [f64], grad_theta: &mut [f64]) -> f64;

    /// Returns `G(z)` and overwrites `grad` with `∇G(z)`.
    fn terminal(&self, z: &[f64], grad: &mut [f64]) -> f64;
}

/// Reusable buffers for [`rollout_gradient_with`].
pub struct AdjointWorkspace {
    states: Vec<f64>,
}

impl AdjointWorkspace {
    pub fn new() -> Self {
        AdjointWorkspace { states: Vec::new() }
    }
}

impl Default for AdjointWorkspace {
    fn default() -> Self {
        Self::new()
    }
}

/// Objective value and exact gradient w.r.t. the agent's `n × q` controls
/// by a backward costate sweep through the Euler recursion.
pub fn rollout_gradient<C: StageCost + ?Sized>(
    model: &DynamicsModel,
    z0: &[f64],
    theta: &[f64],
    grid: &TimeGrid,
    cost: &C,
    grad: &mut [f64],
) -> Result<f64> {
    rollout_gradient_with(model, z0, theta, grid, cost, grad, &mut AdjointWorkspace::new())
}

pub fn rollout_gradient_with<C: StageCost + ?Sized>(
    model: &DynamicsModel,
    z0: &[f64],
    theta: &[f64],
    grid: &TimeGrid,
    cost: &C,
    grad: &mut [f64],
    ws: &mut AdjointWorkspace,
) -> Result<f64> {
    let d = model.state_dim();
    let q = model.control_dim();
    let n = grid.nodes;
    if z0.len() != d || theta.len() != n * q || grad.len() != n * q {
        return Err(Error::Argument(format!(
            "expected z0 of length {d} and controls/gradient of length {}",
            n * q
        )));
    }
    let h = grid.step();
    ws.states.resize(n * d, 0.0);
    let states = &mut ws.states;
    rollout_agent_into(model, z0, theta, grid, states)
        .map_err(|step| Error::RolloutDiverged { agent: 0, step })?;

    let mut lambda = [0.0; 12];
    let mut gz = [0.0; 12];
    let mut fz = [0.0; 12];
    let mut ftheta = [0.0; 4];
    let lambda = &mut lambda[..d];
    let gz = &mut gz[..d];

    let z_last = &states[(n - 1) * d..];
    let mut value = cost.terminal(z_last, lambda);
    let last = n - 1;
    value += h * cost.stage(
        last,
        grid.time(last),
        z_last,
        &theta[last * q..],
        gz,
        &mut grad[last * q..],
    );
    for (l, g) in lambda.iter_mut().zip(gz.iter()) {
        *l += h * g;
    }
    grad[last * q..].iter_mut().for_each(|g| *g *= h);

    for k in (0..n - 1).rev() {
        let zk = &states[k * d..(k + 1) * d];
        let thk = &theta[k * q..(k + 1) * q];
        let (gk, _) = grad[k * q..].split_at_mut(q);
        value += h * cost.stage(k, grid.time(k), zk, thk, gz, gk);
        model.vjp(zk, thk, lambda, &mut fz[..d], &mut ftheta[..q]);
        for j in 0..q {
            gk[j] = h * (gk[j] + ftheta[j]);
        }
        // λ_k = λ_{k+1} + h (∂f/∂z)ᵀ λ_{k+1} + h ∂_z stage_k
        for i in 0..d {
            lambda[i] += h * (fz[i] + gz[i]);
        }
    }
    if !value.is_finite() {
        return Err(Error::Solver("objective evaluated to a non-finite value".into()));
    }
    Ok(value)
}
