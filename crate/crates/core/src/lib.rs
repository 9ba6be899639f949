//! Mean-field control of interacting agent swarms.
//!
//! A Gaussian interaction kernel is replaced by a low-rank feature expansion
//! `K(x, y) ≈ ζ(x)ᵀ K_r ζ(y)`. Dualizing the resulting quadratic interaction
//! decouples the agents: for fixed time-indexed coefficients `a` each agent
//! solves its own trajectory optimization, and `a` is updated in closed form.
//!
//! Main entry points:
//! - [`feature_map`]: random-feature and trained-network expansions.
//! - [`dynamics`]: double integrator and quadrotor, Euler rollouts, adjoint gradients.
//! - [`objective`]: saddle-point objective, `J_r`, stopping criteria.
//! - [`solvers`]: primal-dual loop and the coupled baseline.
//! - [`bench`]: interaction scaling, coefficient reuse, solver race.
//! - [`persistence`] and [`config`]: artifacts and run configuration.

pub mod bench;
pub mod cli;
pub mod config;
pub mod costs;
pub mod dynamics;
pub mod error;
pub mod feature_map;
pub mod gradcheck;
pub mod linalg;
pub mod objective;
pub mod optim;
pub mod persistence;
pub mod problem;
pub mod solvers;

pub use error::{Error, Result};
pub use feature_map::{fit_mlp_features, rff_features, FeatureKind, FeatureMap, KernelSpec, MlpTrainingConfig};
pub use problem::{ControlSchedule, DualCoefficients, InitialDistribution, ProblemSpec, SolveHistory};
pub use solvers::{primal_dual_solve, PrimalDualOptions};
