//! The `mfc` command line: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error, 3 flagged non-convergence, 4 incompatible artifact.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::bench::{bench_interaction, reuse_csv, reuse_study_with, solver_race};
use crate::config::{FeatureBackend, RunConfig};
use crate::error::{Error, Result};
use crate::feature_map::validate_kernel_fit;
use crate::gradcheck::gradient_suite;
use crate::linalg::norm;
use crate::persistence::{controls_csv, load_dual, save_dual, trajectories_csv, CoefficientArchive};
use crate::problem::ProblemSpec;
use crate::solvers::{coupled_solve, primal_dual_solve_with, solve_primal_only};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_INCOMPATIBLE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mfc", version, about = "Mean-field control of agent swarms via kernel expansions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Dotted configuration override, e.g. `solver.max_outer_iters=5`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the feature map and report its kernel-fit error.
    FitKernel(Common),
    /// Run the primal-dual solver.
    Solve(Common),
    /// Minimize the coupled objective over all agents jointly.
    SolveCoupled(Common),
    /// Re-solve only the primal problems with stored coefficients, or run
    /// the reuse study when no coefficients are given.
    Reuse {
        #[command(flatten)]
        common: Common,
        /// A `coefficients.json` written by `solve`.
        #[arg(long, value_name = "PATH")]
        coefficients: Option<PathBuf>,
    },
    /// Time the exact and feature-based interaction evaluations.
    BenchInteraction(Common),
    /// Race the coupled and primal-dual solvers to a `J_r` gradient threshold.
    Race(Common),
    /// Compare adjoint gradients with finite differences.
    CheckGrad(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::FitKernel(c)
            | Command::Solve(c)
            | Command::SolveCoupled(c)
            | Command::BenchInteraction(c)
            | Command::Race(c)
            | Command::CheckGrad(c) => c,
            Command::Reuse { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::FitKernel(_) => "fit-kernel",
            Command::Solve(_) => "solve",
            Command::SolveCoupled(_) => "solve-coupled",
            Command::Reuse { .. } => "reuse",
            Command::BenchInteraction(_) => "bench-interaction",
            Command::Race(_) => "race",
            Command::CheckGrad(_) => "check-grad",
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Argument(_) => EXIT_USAGE,
        Error::Incompatible { .. } => EXIT_INCOMPATIBLE,
        _ => EXIT_FAILURE,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn execute(command: &Command) -> Result<i32> {
    let common = command.common();
    let cfg = load_config(common)?;
    let workers = match common.workers {
        Some(0) => return Err(Error::Argument("--workers must be >= 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Argument(format!("cannot start {workers} workers: {e}")))?;
    fs::create_dir_all(&cfg.output.dir)?;
    let mut out = Output::new(&cfg, command.name(), workers);
    out.write("config.toml", &cfg.to_toml())?;
    let code = pool.install(|| match command {
        Command::FitKernel(_) => fit_kernel(&cfg, &mut out),
        Command::Solve(_) => solve(&cfg, &mut out),
        Command::SolveCoupled(_) => solve_coupled(&cfg, &mut out),
        Command::Reuse { coefficients, .. } => reuse(&cfg, coefficients.as_deref(), &mut out),
        Command::BenchInteraction(_) => bench(&cfg, &mut out),
        Command::Race(_) => race(&cfg, &mut out),
        Command::CheckGrad(_) => check_grad(&cfg, &mut out),
    })?;
    out.finish(code)?;
    Ok(code)
}

/// Writes artifacts and a `manifest.json` carrying the config hash.
struct Output {
    dir: PathBuf,
    hash: String,
    command: &'static str,
    workers: usize,
    files: Vec<String>,
}

impl Output {
    fn new(cfg: &RunConfig, command: &'static str, workers: usize) -> Self {
        Output {
            dir: cfg.output.dir.clone(),
            hash: cfg.hash(),
            command,
            workers,
            files: Vec::new(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.path(name), contents)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn finish(&mut self, exit_code: i32) -> Result<()> {
        let manifest = json!({
            "command": self.command,
            "config_hash": self.hash,
            "workers": self.workers,
            "exit_code": exit_code,
            "files": self.files,
        });
        fs::write(self.path("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

fn build_spec(cfg: &RunConfig, out: &mut Output) -> Result<ProblemSpec> {
    let (map, report) = cfg.build_feature_map()?;
    if cfg.output.featuremap {
        out.write("featuremap.json", &map.to_json())?;
    }
    if let Some(report) = report {
        println!("trained features: validation MSE {:.3e}", report.validation_mse);
    }
    cfg.problem_spec_with(map)
}

fn mean_terminal_distance(spec: &ProblemSpec, rollout: &crate::dynamics::Rollout) -> f64 {
    let target = &spec.costs.target[..3];
    (0..rollout.agents)
        .map(|l| {
            let z = rollout.terminal(l);
            norm(&[z[0] - target[0], z[1] - target[1], z[2] - target[2]])
        })
        .sum::<f64>()
        / rollout.agents as f64
}

fn fit_kernel(cfg: &RunConfig, out: &mut Output) -> Result<i32> {
    let (map, report) = cfg.build_feature_map()?;
    let pairs = cfg.features.training.validation_pairs;
    let mse = match &report {
        Some(r) => r.validation_mse,
        None => validate_kernel_fit(&map.clone().with_alpha1(1.0)?, &cfg.kernel.unit(), pairs, cfg.seeds().features ^ 0x7a11)?,
    };
    out.write("featuremap.json", &map.to_json())?;
    let backend = match cfg.features.backend {
        FeatureBackend::Rff => "rff",
        FeatureBackend::Mlp => "mlp",
        FeatureBackend::File => "file",
    };
    let doc = json!({
        "backend": backend,
        "rank": map.rank(),
        "validation_mse": mse,
        "validation_pairs": pairs,
        "seed": map.seed(),
        "fingerprint": map.fingerprint(),
        "config_hash": cfg.hash(),
        "training": report,
    });
    out.write("fit_report.json", &serde_json::to_string_pretty(&doc)?)?;
    println!("validation MSE (unit kernel): {mse:.3e}");
    Ok(EXIT_OK)
}

fn solve(cfg: &RunConfig, out: &mut Output) -> Result<i32> {
    let spec = build_spec(cfg, out)?;
    let opts = cfg.primal_dual_options();
    println!(
        "solving: N={} n={} T={} r={} outer budget {}",
        spec.agents(),
        spec.grid.nodes,
        spec.grid.horizon,
        spec.rank(),
        opts.max_outer_iters
    );
    let res = primal_dual_solve_with(&spec, &opts, |r| {
        println!(
            "iter {:4}  primal {:.3e}  dual {:.3e}  Jr-grad {:.3e}  Jr {:.6e}",
            r.iter, r.primal_grad_norm, r.dual_residual_max, r.jr_grad_norm, r.jr_value
        );
    })?;
    if cfg.output.coefficients {
        let archive = CoefficientArchive::new(&res.a, &cfg.hash(), res.converged, res.outer_iterations(), spec.agents());
        save_dual(&out.path("coefficients.json"), &archive)?;
        out.files.push("coefficients.json".into());
    }
    if cfg.output.trajectories {
        out.write("trajectories.csv", &trajectories_csv(&res.rollout, &spec.grid))?;
    }
    if cfg.output.controls {
        out.write("controls.csv", &controls_csv(&res.theta, &spec.grid))?;
    }
    if cfg.output.history {
        out.write("history.csv", &res.history.to_csv())?;
    }
    println!(
        "converged: {}  outer iterations: {}  mean terminal distance: {:.4}",
        res.converged,
        res.outer_iterations(),
        mean_terminal_distance(&spec, &res.rollout)
    );
    Ok(if res.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn solve_coupled(cfg: &RunConfig, out: &mut Output) -> Result<i32> {
    let spec = build_spec(cfg, out)?;
    let res = coupled_solve(&spec, &cfg.coupled_options())?;
    let rollout = crate::dynamics::euler_rollout(&spec.model, spec.initial_states(), &res.theta, &spec.grid)?;
    if cfg.output.trajectories {
        out.write("trajectories.csv", &trajectories_csv(&rollout, &spec.grid))?;
    }
    if cfg.output.controls {
        out.write("controls.csv", &controls_csv(&res.theta, &spec.grid))?;
    }
    if cfg.output.history {
        out.write("history.csv", &res.history.to_csv())?;
    }
    println!(
        "converged: {}  iterations: {}  Jr {:.6e}  Jr-grad {:.3e}  mean terminal distance: {:.4}",
        res.converged,
        res.iterations,
        res.value,
        res.grad_norm,
        mean_terminal_distance(&spec, &rollout)
    );
    Ok(if res.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn reuse(cfg: &RunConfig, coefficients: Option<&Path>, out: &mut Output) -> Result<i32> {
    let spec = build_spec(cfg, out)?;
    let opts = cfg.primal_dual_options();
    if let Some(path) = coefficients {
        let (archive, a) = load_dual(path, &spec)?;
        println!(
            "reusing coefficients from {} agents (converged: {})",
            archive.source_agents, archive.converged
        );
        let res = solve_primal_only(&spec, &a, &opts.inner, opts.seed, opts.init_std)?;
        out.write("trajectories.csv", &trajectories_csv(&res.rollout, &spec.grid))?;
        if cfg.output.controls {
            out.write("controls.csv", &controls_csv(&res.theta, &spec.grid))?;
        }
        println!(
            "primal gradient norm {:.3e}  mean terminal distance {:.4}",
            res.grad_norm,
            mean_terminal_distance(&spec, &res.rollout)
        );
        return Ok(if res.converged { EXIT_OK } else { EXIT_NOT_CONVERGED });
    }
    let reports = reuse_study_with(&spec, &cfg.bench.reuse_sources, cfg.bench.reuse_eval, &opts, |r| {
        println!(
            "source N={:5}  eval N={:5}  rel traj diff {:.4e}  rel coeff diff {:.4e}",
            r.source_n, r.eval_n, r.rel_traj_diff, r.rel_coeff_diff
        );
    })?;
    out.write("reuse.csv", &reuse_csv(&reports))?;
    let all = reports.iter().all(|r| r.source_converged && r.primal_converged);
    Ok(if all { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn bench(cfg: &RunConfig, out: &mut Output) -> Result<i32> {
    let (map, _) = cfg.build_feature_map()?;
    let b = bench_interaction(&cfg.bench.ns, &cfg.kernel, &map, cfg.bench.repetitions, cfg.seed)?;
    for r in &b.records {
        println!("{:9} N={:6}  {:.3e} s", r.label, r.n, r.seconds);
    }
    let fmt = |s: Option<f64>| s.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    println!(
        "log-log slope: direct {}  features {}",
        fmt(b.direct_slope),
        fmt(b.features_slope)
    );
    out.write("bench_interaction.csv", &b.to_csv())?;
    Ok(EXIT_OK)
}

fn race(cfg: &RunConfig, out: &mut Output) -> Result<i32> {
    let spec = build_spec(cfg, out)?;
    let report = solver_race(
        &spec,
        &cfg.primal_dual_options(),
        &cfg.coupled_options(),
        cfg.bench.race_threshold,
        cfg.bench.race_runs,
        cfg.bench.race_exact_kernel,
    )?;
    for e in &report.entries {
        let t = e.time_to_threshold.map_or("not reached".to_string(), |t| format!("{t:.3} s"));
        println!("{:14} {t}  final Jr-grad {:.3e}", e.solver, e.final_jr_grad_norm);
        out.write(&format!("race_{}_history.csv", e.solver), &e.history.to_csv())?;
    }
    match report.primal_dual_faster() {
        Some(true) => println!("primal-dual reached the threshold first"),
        Some(false) => println!("coupled reached the threshold first"),
        None => println!("at least one solver did not reach the threshold"),
    }
    out.write("race.csv", &report.to_csv())?;
    let all = report.entries.iter().all(|e| e.time_to_threshold.is_some());
    Ok(if all { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn check_grad(cfg: &RunConfig, out: &mut Output) -> Result<i32> {
    let tol = cfg.bench.check_grad_tol;
    let checks = gradient_suite(cfg.bench.check_grad_instances, cfg.seed)?;
    let mut csv = String::from("check,rel_error,pass\n");
    let mut worst: f64 = 0.0;
    for c in &checks {
        worst = worst.max(c.rel_error);
        csv.push_str(&format!("{},{:?},{}\n", c.label, c.rel_error, c.rel_error <= tol));
    }
    out.write("check_grad.csv", &csv)?;
    let failed = checks.iter().filter(|c| !(c.rel_error <= tol)).count();
    println!("{} checks, worst relative error {worst:.3e}, {failed} above {tol:e}", checks.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}
