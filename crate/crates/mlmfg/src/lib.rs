//! Solver library for multi-leader–multi-follower games (MLMFG).
//!
//! The followers' Nash game is characterized by its KKT system, smoothed with a
//! perturbed Fischer–Burmeister function so that the followers' equilibrium
//! response `y_eps(x)` becomes continuously differentiable in the leaders'
//! strategies `x`. The response Jacobian is obtained by implicit
//! differentiation of the smoothed KKT system, the leaders' Nash game is solved
//! as a nonlinear complementarity problem by a semismooth Newton method with a
//! merit-function line search, and a decreasing-epsilon homotopy drives the
//! smoothing parameter toward zero, approximating a B-/C-stationary Nash
//! equilibrium of the original game.
//!
//! Module map:
//! - [`model`]: game data, the [`model::GameModel`] evaluation interface, the
//!   built-in two-leader–two-follower quadratic instance, instance file I/O.
//! - [`smoothing`]: Fischer–Burmeister function, its smoothed variant,
//!   gradients, and the natural residual used in stopping tests.
//! - [`follower`]: smoothed follower KKT assembly, Newton solver, implicit
//!   response Jacobian, complementarity degeneracy classification.
//! - [`leader`]: the leaders' smoothed VI field, its NCP reformulation, and the
//!   semismooth Newton solver.
//! - [`homotopy`]: the outer decreasing-epsilon loop, trajectory recording, and
//!   stationarity reporting.
//! - [`oracle`]: structurally independent verification machinery
//!   (finite differences, best-response fixed point, projected-gradient leader
//!   oracle, exact polyhedral projection).
//! - [`checks`]: the runnable cross-validation suite behind `mlmfg check`.

pub mod checks;
pub mod follower;
pub mod homotopy;
pub mod leader;
mod lu;
pub mod model;
pub mod oracle;
pub mod par;
pub mod smoothing;

pub use follower::{
    assemble_h, assemble_jacobians, classify_degeneracy, response_jacobian, solve_followers,
    DegeneracyReport, FollowerError, FollowerState, KktJacobianBlocks,
};
pub use homotopy::{
    run_homotopy, stationarity_report, HomotopyError, HomotopyOptions, HomotopyTrajectory,
    Schedule, StationarityReport, TrajectoryRecord,
};
pub use leader::{
    leader_field, ncp_jacobian, ncp_residual, solve_leader_ncp, LeaderError, LeaderSolve,
    LeaderState,
};
pub use model::{
    build_quadratic_model, builtin_instance, load_instance, save_instance, validate_instance,
    Dimensions, GameModel, InstanceIoError, ModelError, Polyhedron, ProblemInstance,
    QuadraticModel, ValidationReport,
};
pub use oracle::{
    best_response_fixed_point, finite_diff_jacobian, leader_oracle_equilibrium,
    project_onto_polyhedron, OracleConfig, OracleError,
};
pub use smoothing::{fb, fb_gradient, fb_smoothed, natural_residual};
