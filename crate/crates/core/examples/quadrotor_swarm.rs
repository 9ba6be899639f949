//! Primal-dual solve of a quadrotor swarm without obstacles.
//!
//! ```text
//! cargo run --release --example quadrotor_swarm -- [KEY=VALUE ...]
//! ```

use kernel_mfc::config::RunConfig;
use kernel_mfc::solvers::primal_dual_solve_with;

fn main() -> kernel_mfc::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::desk_quadrotor().with_overrides(&overrides)?;
    let spec = cfg.problem_spec()?;
    let result = primal_dual_solve_with(&spec, &cfg.primal_dual_options(), |r| {
        if r.iter % 10 == 0 || r.iter == 1 {
            println!(
                "iter {:3}  dual {:.3e}  Jr-grad {:.3e}  Jr {:.6e}",
                r.iter, r.dual_residual_max, r.jr_grad_norm, r.jr_value
            );
        }
    })?;
    let z = result.rollout.terminal(0);
    println!("converged: {}  agent 0 ends at ({:.3}, {:.3}, {:.3})", result.converged, z[0], z[1], z[2]);
    Ok(())
}
