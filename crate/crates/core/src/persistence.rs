//! On-disk artifacts: coefficient archives, trajectory CSVs, history CSVs,
//! and seeded sampling of initial conditions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Rollout, TimeGrid};
use crate::error::{Error, Result};
use crate::problem::{ControlSchedule, DualCoefficients, InitialDistribution, ProblemSpec, SolveHistory};

/// `N` draws from the configured initial distribution, row-major `N × d`.
pub fn sample_initial_conditions(init: &InitialDistribution, agents: usize, seed: u64) -> Result<Vec<f64>> {
    if agents < 1 {
        return Err(Error::Argument("need at least one agent".into()));
    }
    let d = init.mean.len();
    let std = init.variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(agents * d);
    for _ in 0..agents {
        let start = out.len();
        out.extend_from_slice(&init.mean);
        for &c in &init.random_coords {
            let z: f64 = StandardNormal.sample(&mut rng);
            out[start + c] += std * z;
        }
    }
    Ok(out)
}

/// Dual coefficients plus everything needed to decide whether they belong
/// to a consuming problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientArchive {
    pub nodes: usize,
    pub rank: usize,
    /// Row-major `n × r`.
    pub coefficients: Vec<f64>,
    pub grid_fingerprint: String,
    pub map_fingerprint: String,
    pub config_hash: String,
    pub converged: bool,
    pub outer_iterations: usize,
    pub source_agents: usize,
}

impl CoefficientArchive {
    pub fn new(a: &DualCoefficients, config_hash: &str, converged: bool, outer_iterations: usize, source_agents: usize) -> Self {
        CoefficientArchive {
            nodes: a.nodes,
            rank: a.rank,
            coefficients: a.values.clone(),
            grid_fingerprint: a.grid_fingerprint.clone(),
            map_fingerprint: a.map_fingerprint.clone(),
            config_hash: config_hash.to_string(),
            converged,
            outer_iterations,
            source_agents,
        }
    }

    /// Checks the archive against `spec` and returns its coefficients.
    pub fn coefficients_for(&self, spec: &ProblemSpec) -> Result<DualCoefficients> {
        let grid_fp = spec.grid.fingerprint();
        if self.grid_fingerprint != grid_fp {
            return Err(Error::Incompatible {
                field: "grid_fingerprint".into(),
                expected: grid_fp,
                found: self.grid_fingerprint.clone(),
            });
        }
        let map_fp = spec.map.fingerprint();
        if self.map_fingerprint != map_fp {
            return Err(Error::Incompatible {
                field: "map_fingerprint".into(),
                expected: map_fp,
                found: self.map_fingerprint.clone(),
            });
        }
        if self.nodes != spec.grid.nodes || self.rank != spec.rank() || self.coefficients.len() != self.nodes * self.rank {
            return Err(Error::Incompatible {
                field: "shape".into(),
                expected: format!("{}x{}", spec.grid.nodes, spec.rank()),
                found: format!("{}x{} ({} values)", self.nodes, self.rank, self.coefficients.len()),
            });
        }
        DualCoefficients::from_values(spec, self.coefficients.clone())
    }
}

pub fn save_dual(path: &Path, archive: &CoefficientArchive) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(archive)?)?;
    Ok(())
}

/// Loads an archive and verifies it against `spec`.
pub fn load_dual(path: &Path, spec: &ProblemSpec) -> Result<(CoefficientArchive, DualCoefficients)> {
    let archive = read_archive(path)?;
    let a = archive.coefficients_for(spec)?;
    Ok((archive, a))
}

pub fn read_archive(path: &Path) -> Result<CoefficientArchive> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub const STATE_COLUMNS_DI: [&str; 6] = ["x", "y", "z", "vx", "vy", "vz"];
pub const STATE_COLUMNS_QUAD: [&str; 12] = [
    "x", "y", "z", "psi", "theta", "phi", "vx", "vy", "vz", "vpsi", "vtheta", "vphi",
];

fn state_columns(d: usize) -> Vec<String> {
    match d {
        6 => STATE_COLUMNS_DI.iter().map(|s| s.to_string()).collect(),
        12 => STATE_COLUMNS_QUAD.iter().map(|s| s.to_string()).collect(),
        _ => (0..d).map(|i| format!("z{i}")).collect(),
    }
}

/// Trajectory table: `agent,t,<state columns>`, rows in (agent, node) order.
pub fn trajectories_csv(rollout: &Rollout, grid: &TimeGrid) -> String {
    let mut out = String::from("agent,t");
    for c in state_columns(rollout.state_dim) {
        out.push(',');
        out.push_str(&c);
    }
    out.push('\n');
    for l in 0..rollout.agents {
        for k in 0..rollout.nodes {
            let _ = write!(out, "{l},{:?}", grid.time(k));
            for v in rollout.state(l, k) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn export_trajectories(rollout: &Rollout, grid: &TimeGrid, path: &Path) -> Result<()> {
    fs::write(path, trajectories_csv(rollout, grid))?;
    Ok(())
}

/// Inverse of [`trajectories_csv`]; returns the rollout and node times.
pub fn parse_trajectories(text: &str) -> Result<(Rollout, Vec<f64>)> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Parse("empty trajectories file".into()))?
        .split(',')
        .collect();
    if header.len() < 3 || header[0] != "agent" || header[1] != "t" {
        return Err(Error::Parse("trajectories header must start with agent,t".into()));
    }
    let d = header.len() - 2;
    let mut rows: Vec<(usize, f64, Vec<f64>)> = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != d + 2 {
            return Err(Error::Parse(format!("row {} has {} columns, expected {}", i + 1, cols.len(), d + 2)));
        }
        let bad = |c: &str| Error::Parse(format!("row {}: bad value {c:?}", i + 1));
        let agent: usize = cols[0].parse().map_err(|_| bad(cols[0]))?;
        let t: f64 = cols[1].parse().map_err(|_| bad(cols[1]))?;
        let state = cols[2..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| bad(c)))
            .collect::<Result<Vec<_>>>()?;
        rows.push((agent, t, state));
    }
    if rows.is_empty() {
        return Err(Error::Parse("trajectories file has no rows".into()));
    }
    let agents = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    if rows.len() % agents != 0 {
        return Err(Error::Parse("agents have different numbers of nodes".into()));
    }
    let nodes = rows.len() / agents;
    let mut states = Vec::with_capacity(rows.len() * d);
    for (idx, (agent, _, state)) in rows.iter().enumerate() {
        if *agent != idx / nodes {
            return Err(Error::Parse(format!("row {} is out of (agent, node) order", idx + 1)));
        }
        states.extend_from_slice(state);
    }
    let times = rows[..nodes].iter().map(|r| r.1).collect();
    Ok((
        Rollout {
            states,
            agents,
            nodes,
            state_dim: d,
        },
        times,
    ))
}

/// Control table: `agent,t,<control columns>`, rows in (agent, node) order.
pub fn controls_csv(theta: &ControlSchedule, grid: &TimeGrid) -> String {
    let names: Vec<String> = match theta.control_dim {
        3 => ["ax", "ay", "az"].iter().map(|s| s.to_string()).collect(),
        4 => ["u", "tau_psi", "tau_theta", "tau_phi"].iter().map(|s| s.to_string()).collect(),
        q => (0..q).map(|i| format!("u{i}")).collect(),
    };
    let mut out = format!("agent,t,{}\n", names.join(","));
    let q = theta.control_dim;
    for l in 0..theta.agents {
        let th = theta.agent(l);
        for k in 0..theta.nodes {
            let _ = write!(out, "{l},{:?}", grid.time(k));
            for v in &th[k * q..(k + 1) * q] {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_history(history: &SolveHistory, path: &Path) -> Result<()> {
    fs::write(path, history.to_csv())?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<SolveHistory> {
    SolveHistory::from_csv(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_sits_at_mean() {
        let init = InitialDistribution {
            variance: 0.0,
            ..InitialDistribution::double_integrator(3)
        };
        let z = sample_initial_conditions(&init, 4, 3).unwrap();
        for row in z.chunks(6) {
            assert_eq!(row, init.mean.as_slice());
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let init = InitialDistribution::double_integrator(0);
        let a = sample_initial_conditions(&init, 10, 42).unwrap();
        let b = sample_initial_conditions(&init, 10, 42).unwrap();
        let c = sample_initial_conditions(&init, 10, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_mean_within_three_sigma() {
        let init = InitialDistribution::double_integrator(0);
        let n = 100_000;
        let z = sample_initial_conditions(&init, n, 9).unwrap();
        let tol = 3.0 * init.variance.sqrt() / (n as f64).sqrt();
        for c in 0..6 {
            let mean = z.chunks(6).map(|r| r[c]).sum::<f64>() / n as f64;
            assert!((mean - init.mean[c]).abs() <= tol, "coord {c}: {mean}");
        }
    }

    #[test]
    fn quadrotor_only_perturbs_position() {
        let z = sample_initial_conditions(&InitialDistribution::quadrotor(0), 5, 1).unwrap();
        for row in z.chunks(12) {
            assert!(row[3..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn two_nodes_one_agent_gives_two_rows() {
        let rollout = Rollout {
            states: (0..12).map(|i| i as f64 * 0.1).collect(),
            agents: 1,
            nodes: 2,
            state_dim: 6,
        };
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let text = trajectories_csv(&rollout, &grid);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap(), "agent,t,x,y,z,vx,vy,vz");
        let (back, times) = parse_trajectories(&text).unwrap();
        assert_eq!(back, rollout);
        assert_eq!(times, vec![0.0, 1.0]);
    }
}
