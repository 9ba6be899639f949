//! Problem definition and the arrays the solvers exchange.

use serde::{Deserialize, Serialize};

use crate::costs::CostSpec;
use crate::dynamics::{DynamicsModel, TimeGrid};
use crate::error::{ensure_finite, Error, Result};
use crate::feature_map::{FeatureMap, KernelSpec};
use crate::persistence::sample_initial_conditions;

/// Isotropic Gaussian over the coordinates in `random_coords`; all other
/// coordinates sit at `mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialDistribution {
    pub mean: Vec<f64>,
    pub variance: f64,
    pub random_coords: Vec<usize>,
    pub seed: u64,
}

impl InitialDistribution {
    /// `N((0, −0.5, 0, 0, 0, 0), 0.8 I)` on the full double-integrator state.
    pub fn double_integrator(seed: u64) -> Self {
        InitialDistribution {
            mean: vec![0.0, -0.5, 0.0, 0.0, 0.0, 0.0],
            variance: 0.8,
            random_coords: (0..6).collect(),
            seed,
        }
    }

    /// Spatial coordinates `N((0, −0.5, 0), 0.8 I₃)`, angles and velocities zero.
    pub fn quadrotor(seed: u64) -> Self {
        let mut mean = vec![0.0; 12];
        mean[1] = -0.5;
        InitialDistribution {
            mean,
            variance: 0.8,
            random_coords: vec![0, 1, 2],
            seed,
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.mean.len() != state_dim {
            return Err(Error::Argument(format!(
                "initial mean has {} entries, state dimension is {state_dim}",
                self.mean.len()
            )));
        }
        if !(self.variance >= 0.0 && self.variance.is_finite()) {
            return Err(Error::Argument("initial variance must be >= 0".into()));
        }
        if self.random_coords.iter().any(|&c| c >= state_dim) {
            return Err(Error::Argument("random_coords out of range".into()));
        }
        Ok(())
    }
}

/// Everything that defines one discretized MFC instance, including the
/// sampled initial states of its `N` agents.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub model: DynamicsModel,
    pub grid: TimeGrid,
    pub costs: CostSpec,
    pub map: FeatureMap,
    pub kernel: KernelSpec,
    pub init: InitialDistribution,
    agents: usize,
    z0: Vec<f64>,
}

impl ProblemSpec {
    pub fn new(
        model: DynamicsModel,
        grid: TimeGrid,
        costs: CostSpec,
        map: FeatureMap,
        kernel: KernelSpec,
        init: InitialDistribution,
        agents: usize,
    ) -> Result<Self> {
        model.validate()?;
        grid.validate()?;
        kernel.validate()?;
        let d = model.state_dim();
        costs.validate(d)?;
        init.validate(d)?;
        if agents < 1 {
            return Err(Error::Argument("need at least one agent".into()));
        }
        if map.input_dim() != 3 || kernel.input_dim != 3 {
            return Err(Error::Argument("features act on the 3 spatial coordinates".into()));
        }
        let z0 = sample_initial_conditions(&init, agents, init.seed)?;
        Ok(ProblemSpec {
            model,
            grid,
            costs,
            map,
            kernel,
            init,
            agents,
            z0,
        })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    /// Initial states, row-major `N × d`.
    pub fn initial_states(&self) -> &[f64] {
        &self.z0
    }

    pub fn initial_state(&self, l: usize) -> &[f64] {
        let d = self.model.state_dim();
        &self.z0[l * d..(l + 1) * d]
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.model.control_dim()
    }

    pub fn rank(&self) -> usize {
        self.map.rank()
    }

    /// Same problem with a fresh sample of `agents` initial states.
    pub fn with_agents(&self, agents: usize, seed: u64) -> Result<Self> {
        let init = InitialDistribution {
            seed,
            ..self.init.clone()
        };
        ProblemSpec::new(
            self.model,
            self.grid,
            self.costs.clone(),
            self.map.clone(),
            self.kernel.clone(),
            init,
            agents,
        )
    }

    /// Same problem with explicitly given initial states.
    pub fn with_initial_states(&self, z0: Vec<f64>) -> Result<Self> {
        let d = self.state_dim();
        if z0.is_empty() || z0.len() % d != 0 {
            return Err(Error::Argument(format!("initial states must be N x {d}")));
        }
        ensure_finite(&z0, "initial states")?;
        let mut out = self.clone();
        out.agents = z0.len() / d;
        out.z0 = z0;
        Ok(out)
    }

    pub fn with_map(&self, map: FeatureMap) -> Result<Self> {
        if map.input_dim() != 3 {
            return Err(Error::Argument("features act on the 3 spatial coordinates".into()));
        }
        let mut out = self.clone();
        out.kernel = map.kernel_spec();
        out.map = map;
        Ok(out)
    }

    pub fn empty_controls(&self) -> ControlSchedule {
        ControlSchedule::zeros(self.agents, self.grid.nodes, self.control_dim())
    }

    pub(crate) fn check_controls(&self, theta: &ControlSchedule) -> Result<()> {
        if theta.agents != self.agents || theta.nodes != self.grid.nodes || theta.control_dim != self.control_dim() {
            return Err(Error::Argument(format!(
                "control schedule is {}x{}x{}, problem expects {}x{}x{}",
                theta.agents,
                theta.nodes,
                theta.control_dim,
                self.agents,
                self.grid.nodes,
                self.control_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_duals(&self, a: &DualCoefficients) -> Result<()> {
        if a.nodes != self.grid.nodes || a.rank != self.rank() {
            return Err(Error::Argument(format!(
                "dual coefficients are {}x{}, problem expects {}x{}",
                a.nodes,
                a.rank,
                self.grid.nodes,
                self.rank()
            )));
        }
        Ok(())
    }
}

/// Controls `θ`, row-major `N × n × q`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSchedule {
    pub values: Vec<f64>,
    pub agents: usize,
    pub nodes: usize,
    pub control_dim: usize,
}

impl ControlSchedule {
    pub fn zeros(agents: usize, nodes: usize, control_dim: usize) -> Self {
        ControlSchedule {
            values: vec![0.0; agents * nodes * control_dim],
            agents,
            nodes,
            control_dim,
        }
    }

    pub fn from_values(values: Vec<f64>, agents: usize, nodes: usize, control_dim: usize) -> Result<Self> {
        if values.len() != agents * nodes * control_dim {
            return Err(Error::Argument("control values do not match the shape".into()));
        }
        ensure_finite(&values, "controls")?;
        Ok(ControlSchedule {
            values,
            agents,
            nodes,
            control_dim,
        })
    }

    pub fn per_agent(&self) -> usize {
        self.nodes * self.control_dim
    }

    pub fn agent(&self, l: usize) -> &[f64] {
        let len = self.per_agent();
        &self.values[l * len..(l + 1) * len]
    }

    pub fn agent_mut(&mut self, l: usize) -> &mut [f64] {
        let len = self.per_agent();
        &mut self.values[l * len..(l + 1) * len]
    }
}

/// Global interaction coefficients `a`, row-major `n × r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualCoefficients {
    pub values: Vec<f64>,
    pub nodes: usize,
    pub rank: usize,
    pub grid_fingerprint: String,
    pub map_fingerprint: String,
}

impl DualCoefficients {
    pub fn zeros(spec: &ProblemSpec) -> Self {
        DualCoefficients {
            values: vec![0.0; spec.grid.nodes * spec.rank()],
            nodes: spec.grid.nodes,
            rank: spec.rank(),
            grid_fingerprint: spec.grid.fingerprint(),
            map_fingerprint: spec.map.fingerprint(),
        }
    }

    pub fn from_values(spec: &ProblemSpec, values: Vec<f64>) -> Result<Self> {
        let mut a = Self::zeros(spec);
        if values.len() != a.values.len() {
            return Err(Error::Argument("dual values do not match n x r".into()));
        }
        ensure_finite(&values, "dual coefficients")?;
        a.values = values;
        Ok(a)
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.values[k * self.rank..(k + 1) * self.rank]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.rank..(k + 1) * self.rank]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub primal_grad_norm: f64,
    pub dual_residual_max: f64,
    pub jr_grad_norm: f64,
    pub jr_value: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveHistory {
    pub records: Vec<IterationRecord>,
}

impl SolveHistory {
    pub const CSV_HEADER: &'static str = "iter,primal_grad_norm,dual_residual_max,Jr_grad_norm,Jr_value,wall_clock_s";

    pub fn push(&mut self, record: IterationRecord) {
        self.records.push(record);
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?}\n",
                r.iter, r.primal_grad_norm, r.dual_residual_max, r.jr_grad_norm, r.jr_value, r.wall_clock_s
            ));
        }
        out
    }

    /// Same rows with the wall-clock column zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> SolveHistory {
        SolveHistory {
            records: self
                .records
                .iter()
                .map(|r| IterationRecord {
                    wall_clock_s: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == Self::CSV_HEADER => {}
            _ => return Err(Error::Parse("history CSV header mismatch".into())),
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Parse(format!("history row {} has {} columns", i + 1, cols.len())));
            }
            let f = |j: usize| -> Result<f64> {
                cols[j]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("history row {}: bad number {:?}", i + 1, cols[j])))
            };
            records.push(IterationRecord {
                iter: cols[0]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("history row {}: bad iteration", i + 1)))?,
                primal_grad_norm: f(1)?,
                dual_residual_max: f(2)?,
                jr_grad_norm: f(3)?,
                jr_value: f(4)?,
                wall_clock_s: f(5)?,
            });
        }
        Ok(SolveHistory { records })
    }
}
