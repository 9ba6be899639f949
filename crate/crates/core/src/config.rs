//! Run configuration: one TOML document per experiment, plus dotted
//! `key=value` overrides checked against the schema.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::costs::{CostSpec, ObstacleField};
use crate::dynamics::{DynamicsModel, TimeGrid};
use crate::error::{Error, Result};
use crate::feature_map::{fit_mlp_features, rff_features, sha256_hex, FeatureMap, FitReport, KernelSpec, MlpTrainingConfig};
use crate::linalg::SpdMatrix;
use crate::optim::OptimizerOptions;
use crate::problem::{InitialDistribution, ProblemSpec};
use crate::solvers::{CoupledOptions, PrimalDualOptions, StopRule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every other seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemSection,
    pub costs: CostSpec,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub features: FeatureSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub coupled: CoupledSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub model: DynamicsModel,
    pub agents: usize,
    pub horizon: f64,
    pub nodes: usize,
    /// Defaults to the model's standard initial distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    pub mean: Vec<f64>,
    pub variance: f64,
    pub random_coords: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureBackend {
    Rff,
    Mlp,
    /// Load `featuremap.json` from `features.path`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    pub backend: FeatureBackend,
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub kr: SpdMatrix,
    pub training: MlpTrainingConfig,
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            backend: FeatureBackend::Rff,
            rank: 50,
            path: None,
            kr: SpdMatrix::identity(0),
            training: MlpTrainingConfig::desk(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub inner: Vec<OptimizerOptions>,
    pub max_outer_iters: usize,
    pub eps_tol: f64,
    pub init_std: f64,
    pub stop_rule: StopRule,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = PrimalDualOptions::default();
        SolverSection {
            gamma: d.gamma,
            inner: d.inner,
            max_outer_iters: d.max_outer_iters,
            eps_tol: d.eps_tol,
            init_std: d.init_std,
            stop_rule: d.stop_rule,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoupledSection {
    pub optimizer: OptimizerOptions,
    pub exact_kernel: bool,
}

impl Default for CoupledSection {
    fn default() -> Self {
        let d = CoupledOptions::default();
        CoupledSection {
            optimizer: d.optimizer,
            exact_kernel: d.exact_kernel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub ns: Vec<usize>,
    pub repetitions: usize,
    pub reuse_sources: Vec<usize>,
    pub reuse_eval: usize,
    pub race_threshold: f64,
    pub race_runs: usize,
    /// Also race the exact-kernel coupled variant.
    pub race_exact_kernel: bool,
    /// Agents and relative tolerance for the finite-difference suite.
    pub check_grad_instances: usize,
    pub check_grad_tol: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            ns: vec![500, 1000, 2000, 4000],
            repetitions: 3,
            reuse_sources: vec![50, 100],
            reuse_eval: 200,
            race_threshold: 0.5,
            race_runs: 3,
            race_exact_kernel: false,
            check_grad_instances: 20,
            check_grad_tol: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub trajectories: bool,
    pub history: bool,
    pub coefficients: bool,
    pub featuremap: bool,
    pub controls: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
            trajectories: true,
            history: true,
            coefficients: true,
            featuremap: true,
            controls: true,
        }
    }
}

/// Seeds derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub features: u64,
    pub init: u64,
    pub solver: u64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration always serializes")
    }

    /// Content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            features: self.seed,
            init: self.seed.wrapping_add(1),
            solver: self.seed.wrapping_add(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.model.validate()?;
        TimeGrid::new(self.problem.horizon, self.problem.nodes)?;
        self.kernel.validate()?;
        self.costs.validate(self.problem.model.state_dim())?;
        if self.problem.agents < 1 {
            return Err(Error::Config("problem.agents must be >= 1".into()));
        }
        if self.features.rank < 1 {
            return Err(Error::Config("features.rank must be >= 1".into()));
        }
        if self.features.backend == FeatureBackend::File && self.features.path.is_none() {
            return Err(Error::Config("features.backend = \"file\" needs features.path".into()));
        }
        self.primal_dual_options().validate()?;
        self.coupled.optimizer.validate()?;
        if self.bench.repetitions < 1 || self.bench.race_runs < 1 {
            return Err(Error::Config("bench repetitions must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies dotted overrides such as `solver.max_outer_iters=0`.
    ///
    /// The value is parsed as a TOML literal (bare words fall back to
    /// strings) and must have the type of the value it replaces.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not KEY=VALUE")))?;
            apply_override(&mut doc, key.trim(), raw.trim())?;
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.problem.horizon, self.problem.nodes)
    }

    pub fn initial_distribution(&self) -> InitialDistribution {
        let seed = self.seeds().init;
        match (&self.problem.init, self.problem.model) {
            (Some(i), _) => InitialDistribution {
                mean: i.mean.clone(),
                variance: i.variance,
                random_coords: i.random_coords.clone(),
                seed,
            },
            (None, DynamicsModel::DoubleIntegrator) => InitialDistribution::double_integrator(seed),
            (None, DynamicsModel::Quadrotor { .. }) => InitialDistribution::quadrotor(seed),
        }
    }

    /// Builds (or loads) the feature map; the report is present for trained maps.
    pub fn build_feature_map(&self) -> Result<(FeatureMap, Option<FitReport>)> {
        let (map, report) = match self.features.backend {
            FeatureBackend::Rff => (rff_features(&self.kernel, self.features.rank, self.seeds().features)?, None),
            FeatureBackend::Mlp => {
                let mut training = self.features.training.clone();
                training.rank = self.features.rank;
                let (map, report) = fit_mlp_features(&self.kernel, &training, self.seeds().features)?;
                (map, Some(report))
            }
            FeatureBackend::File => {
                let path = self.features.path.as_ref().expect("validated");
                let map = FeatureMap::from_json(&fs::read_to_string(path)?)?;
                if map.rank() != self.features.rank {
                    return Err(Error::Config(format!(
                        "{} has rank {}, config says {}",
                        path.display(),
                        map.rank(),
                        self.features.rank
                    )));
                }
                (map.with_alpha1(self.kernel.alpha1)?, None)
            }
        };
        let keep_stored = self.features.backend == FeatureBackend::File && self.features.kr.is_identity();
        let map = if keep_stored { map } else { map.with_kr(self.features.kr.clone())? };
        Ok((map, report))
    }

    pub fn problem_spec_with(&self, map: FeatureMap) -> Result<ProblemSpec> {
        ProblemSpec::new(
            self.problem.model,
            self.grid()?,
            self.costs.clone(),
            map,
            self.kernel.clone(),
            self.initial_distribution(),
            self.problem.agents,
        )
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let (map, _) = self.build_feature_map()?;
        self.problem_spec_with(map)
    }

    pub fn primal_dual_options(&self) -> PrimalDualOptions {
        PrimalDualOptions {
            gamma: self.solver.gamma,
            inner: self.solver.inner.clone(),
            max_outer_iters: self.solver.max_outer_iters,
            eps_tol: self.solver.eps_tol,
            seed: self.seeds().solver,
            init_std: self.solver.init_std,
            stop_rule: self.solver.stop_rule,
        }
    }

    pub fn coupled_options(&self) -> CoupledOptions {
        CoupledOptions {
            optimizer: self.coupled.optimizer.clone(),
            exact_kernel: self.coupled.exact_kernel,
            seed: self.seeds().solver,
            init_std: self.solver.init_std,
        }
    }

    /// Double integrator with the two pillars, small enough for a laptop.
    pub fn desk_double_integrator() -> Self {
        RunConfig {
            seed: 0,
            problem: ProblemSection {
                model: DynamicsModel::DoubleIntegrator,
                agents: 100,
                horizon: 5.0,
                nodes: 50,
                init: None,
            },
            costs: CostSpec {
                alpha2: 1e7,
                alpha3: 1e4,
                target: vec![0.0, 0.0, 7.0, 0.0, 0.0, 0.0],
                obstacles: ObstacleField::two_pillars(),
            },
            kernel: KernelSpec {
                alpha1: 2e5,
                bandwidth: 1.0,
                input_dim: 3,
            },
            features: FeatureSection::default(),
            solver: SolverSection {
                max_outer_iters: 20,
                ..SolverSection::default()
            },
            coupled: CoupledSection::default(),
            bench: BenchSection::default(),
            output: OutputSection::default(),
        }
    }

    /// Quadrotor swarm without obstacles.
    pub fn desk_quadrotor() -> Self {
        let mut target = vec![0.0; 12];
        target[2] = 7.0;
        RunConfig {
            problem: ProblemSection {
                model: DynamicsModel::quadrotor(),
                agents: 50,
                horizon: 5.0,
                nodes: 50,
                init: None,
            },
            costs: CostSpec {
                alpha2: 0.0,
                alpha3: 2e3,
                target,
                obstacles: ObstacleField::empty(),
            },
            kernel: KernelSpec {
                alpha1: 5e4,
                bandwidth: 1.0,
                input_dim: 3,
            },
            solver: SolverSection {
                inner: vec![OptimizerOptions::lbfgs(20, 1e-3)],
                max_outer_iters: 200,
                ..SolverSection::default()
            },
            ..Self::desk_double_integrator()
        }
    }
}

fn apply_override(doc: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let new = parse_literal(raw);
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    let converted = match t.get(*part) {
                        Some(old) => coerce(old, new, key)?,
                        // absent optional field; the schema check decides
                        None => new,
                    };
                    t.insert(part.to_string(), converted);
                    return Ok(());
                }
                t.get_mut(*part)
                    .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?
            }
            toml::Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("{key:?}: {part:?} is not an array index")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("{key:?}: index {idx} out of range (len {len})")))?;
                if last {
                    *slot = coerce(slot, new, key)?;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("{key:?}: cannot descend into a scalar"))),
        };
    }
    unreachable!("the loop returns at the last key part")
}

fn parse_literal(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn coerce(old: &toml::Value, new: toml::Value, key: &str) -> Result<toml::Value> {
    use toml::Value as V;
    match (old, new) {
        (V::Float(_), V::Integer(i)) => Ok(V::Float(i as f64)),
        (V::Integer(_), V::Integer(i)) if i < 0 => Err(Error::Config(format!("{key:?} must be non-negative"))),
        (o, n) if std::mem::discriminant(o) == std::mem::discriminant(&n) => Ok(n),
        (o, n) => Err(Error::Config(format!(
            "{key:?} expects a {}, got a {}",
            o.type_str(),
            n.type_str()
        ))),
    }
}
