//! Fits dual coefficients on a small swarm and reuses them for a larger one.
//!
//! ```text
//! cargo run --release --example coefficient_reuse -- [KEY=VALUE ...]
//! ```

use kernel_mfc::bench::{reuse_csv, reuse_study_with};
use kernel_mfc::config::RunConfig;

fn main() -> kernel_mfc::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let defaults = [
        "problem.nodes=20",
        "kernel.alpha1=1.0",
        "costs.alpha2=0.0",
        "costs.alpha3=100.0",
        "solver.max_outer_iters=40",
        "solver.eps_tol=0.05",
    ];
    let cfg = RunConfig::desk_double_integrator()
        .with_overrides(&defaults)?
        .with_overrides(&overrides)?;
    let spec = cfg.problem_spec()?;
    let reports = reuse_study_with(&spec, &[10, 20], 40, &cfg.primal_dual_options(), |r| {
        println!("{:4} -> {:4}  trajectory difference {:.3e}", r.source_n, r.eval_n, r.rel_traj_diff);
    })?;
    print!("{}", reuse_csv(&reports));
    Ok(())
}
