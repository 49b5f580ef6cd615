//! Numerical toolkit for control barrier-value functions.
//!
//! Builds discounted reachability value functions on state-space grids by
//! integrating a Hamilton-Jacobi variational inequality backward in time,
//! synthesizes safety-filter controllers from them (pure maximin, switching,
//! and min-norm quadratic-program filters), and validates the controllers in
//! closed-loop simulation against adversarial disturbance.
//!
//! Start from the `examples/` directory: each example is a runnable tour of
//! one capability. The `cbvf` binary drives the same machinery from
//! line-oriented config files.

pub mod control;
pub mod experiment;
pub mod grid;
pub mod model;
pub mod sim;
pub mod solver;

pub use control::{
    cbf_qp_policy, cbvf_qp_policy, constant_reference, default_switch_margin, heading_reference,
    kkt_residual, least_restrictive_policy, optimal_safe_policy, pd_position_reference,
    qp_constraint_terms, solve_min_norm_qp, Policy, PolicyBuildError, PolicyDecision, PolicyError,
    PolicyKind, QpError, QpInstance,
};
pub use grid::{Grid, GridError, GridSpec, ScalarField};
pub use model::{BoxBounds, ControlAffineModel, ModelError};
pub use sim::{
    simulate, trajectory_metrics, worst_case_disturbance, DisturbanceStrategy, Metrics, Sample,
    SimError, Trajectory,
};
pub use solver::{
    dissipation_bounds, hamiltonian, numerical_hamiltonian, solve_cbvf, solve_stationary,
    step_backward, SolveConfig, SolveError, TimeScheme, ValueFunction, ValueQueryError,
};
