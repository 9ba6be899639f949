//! Races the primal-dual solver against direct minimization of the coupled
//! objective.
//!
//! ```text
//! cargo run --release --example solver_race -- [KEY=VALUE ...]
//! ```

use kernel_mfc::bench::solver_race;
use kernel_mfc::config::RunConfig;

fn main() -> kernel_mfc::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::desk_quadrotor()
        .with_overrides(&["problem.agents=10", "bench.race_runs=1", "kernel.alpha1=1.0"])?
        .with_overrides(&overrides)?;
    let spec = cfg.problem_spec()?;
    let report = solver_race(
        &spec,
        &cfg.primal_dual_options(),
        &cfg.coupled_options(),
        cfg.bench.race_threshold,
        cfg.bench.race_runs,
        cfg.bench.race_exact_kernel,
    )?;
    print!("{}", report.to_csv());
    match report.primal_dual_faster() {
        Some(true) => println!("primal-dual reached the threshold first"),
        Some(false) => println!("coupled reached the threshold first"),
        None => println!("at least one solver missed the threshold"),
    }
    Ok(())
}
