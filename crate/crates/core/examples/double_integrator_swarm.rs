//! Primal-dual solve of the double-integrator swarm with two pillar obstacles.
//!
//! ```text
//! cargo run --release --example double_integrator_swarm -- [KEY=VALUE ...]
//! ```
//!
//! Arguments are configuration overrides, e.g. `problem.agents=200`.

use kernel_mfc::config::RunConfig;
use kernel_mfc::linalg::norm;
use kernel_mfc::solvers::primal_dual_solve_with;

fn main() -> kernel_mfc::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::desk_double_integrator().with_overrides(&overrides)?;
    let spec = cfg.problem_spec()?;
    let opts = cfg.primal_dual_options();
    println!(
        "N={} n={} T={} r={} alpha1={:e}",
        spec.agents(),
        spec.grid.nodes,
        spec.grid.horizon,
        spec.rank(),
        spec.kernel.alpha1
    );
    let result = primal_dual_solve_with(&spec, &opts, |r| {
        println!(
            "iter {:3}  primal {:.3e}  dual {:.3e}  Jr-grad {:.3e}  Jr {:.6e}  {:.1}s",
            r.iter, r.primal_grad_norm, r.dual_residual_max, r.jr_grad_norm, r.jr_value, r.wall_clock_s
        );
    })?;
    let target = &spec.costs.target[..3];
    let mean_dist = (0..spec.agents())
        .map(|l| {
            let z = result.rollout.terminal(l);
            norm(&[z[0] - target[0], z[1] - target[1], z[2] - target[2]])
        })
        .sum::<f64>()
        / spec.agents() as f64;
    println!("converged: {}  mean terminal distance: {mean_dist:.4}", result.converged);
    Ok(())
}
