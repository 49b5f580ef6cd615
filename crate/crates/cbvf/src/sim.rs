//! Closed-loop rollouts with safety metrics.
//!
//! A rollout integrates the dynamics with classical fourth-order
//! Runge-Kutta from a start time up to time 0, holding the control and the
//! disturbance constant over each step (zero-order hold, both sampled at the
//! step's start). Every sample records the interpolated barrier value and
//! target margin, so safety and decay properties can be checked sample by
//! sample afterwards. Trajectories that leave the grid end early with a
//! domain-exit flag rather than an error.

use std::sync::Arc;

use thiserror::Error;

use crate::control::{Policy, PolicyError, PolicyKind};
use crate::grid::{Grid, GridError, ScalarField};
use crate::model::ControlAffineModel;
use crate::solver::{ValueFunction, ValueQueryError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("start state outside the grid domain")]
    StartOutOfDomain(#[source] GridError),
    #[error("start time {t0} outside [{horizon}, 0]")]
    StartTimeOutOfRange { t0: f64, horizon: f64 },
    #[error("dt_sim must be > 0, got {0}")]
    BadStepSize(f64),
    #[error("constant disturbance lies outside the disturbance box")]
    ConstantOutOfBounds,
    #[error("worst-case disturbance needs a model with disturbance channels")]
    NoDisturbanceChannel,
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("trajectory has no samples")]
    EmptyTrajectory,
    #[error("policy evaluation failed: {0}")]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Value(#[from] ValueQueryError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Disturbance inputs for a rollout: none, a fixed vector, or the
/// adversarial state-feedback strategy that descends the barrier's gradient.
/// State feedback attains the adversarial optimum pointwise for dynamics
/// affine in the inputs, where the inner minimizer does not depend on the
/// control.
#[derive(Clone)]
pub enum DisturbanceStrategy {
    Zero,
    Constant(Vec<f64>),
    WorstCase { vf: Arc<ValueFunction> },
}

impl std::fmt::Debug for DisturbanceStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DisturbanceStrategy::Zero => write!(f, "Zero"),
            DisturbanceStrategy::Constant(v) => write!(f, "Constant({v:?})"),
            DisturbanceStrategy::WorstCase { .. } => write!(f, "WorstCase"),
        }
    }
}

impl DisturbanceStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            DisturbanceStrategy::Zero => "zero",
            DisturbanceStrategy::Constant(_) => "constant",
            DisturbanceStrategy::WorstCase { .. } => "worst_case",
        }
    }

    /// Checked constructor for the fixed-vector strategy.
    pub fn constant(model: &ControlAffineModel, d: Vec<f64>) -> Result<Self, SimError> {
        if !model.d_box().contains(&d) {
            return Err(SimError::ConstantOutOfBounds);
        }
        Ok(DisturbanceStrategy::Constant(d))
    }

    fn evaluate(
        &self,
        model: &ControlAffineModel,
        x: &[f64],
        t: f64,
    ) -> Result<Vec<f64>, SimError> {
        match self {
            DisturbanceStrategy::Zero => Ok(vec![0.0; model.disturbance_dim()]),
            DisturbanceStrategy::Constant(d) => Ok(d.clone()),
            DisturbanceStrategy::WorstCase { vf } => {
                let grad = vf.gradient_at(x, t)?;
                let (_, d) = model.bang_bang_inputs(x, &grad);
                Ok(d)
            }
        }
    }
}

/// Adversarial disturbance built from a value function: per channel, the box
/// face that drives the barrier down (midpoint on gradient ties).
pub fn worst_case_disturbance(
    vf: Arc<ValueFunction>,
    model: &ControlAffineModel,
) -> Result<DisturbanceStrategy, SimError> {
    if model.disturbance_dim() == 0 {
        return Err(SimError::NoDisturbanceChannel);
    }
    Ok(DisturbanceStrategy::WorstCase { vf })
}

/// One recorded instant of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub d: Vec<f64>,
    /// Interpolated barrier value `B(x, t)`.
    pub barrier: f64,
    /// Interpolated safety target `l(x)`.
    pub target: f64,
    /// Which controller branch produced `u`.
    pub mode: PolicyKind,
}

/// Closed-loop record of a rollout.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub dt_sim: f64,
    /// True when the rollout stopped early because the state left the grid.
    pub exited_domain: bool,
}

/// Aggregate safety metrics of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub min_target: f64,
    pub min_barrier: f64,
    pub target_reached: bool,
    pub final_state: Vec<f64>,
    /// Sum of squared control norms times the step size.
    pub control_effort: f64,
    pub relaxation_count: usize,
    pub exited_domain: bool,
}

fn rk4_step(
    model: &ControlAffineModel,
    x: &[f64],
    u: &[f64],
    d: &[f64],
    dt: f64,
    out: &mut Vec<f64>,
) {
    let n = x.len();
    let mut scratch = vec![0.0; n * model.control_dim().max(model.disturbance_dim()).max(1)];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    model.eval_dynamics_unchecked(x, u, d, &mut k1, &mut scratch);
    for i in 0..n {
        stage[i] = x[i] + 0.5 * dt * k1[i];
    }
    model.eval_dynamics_unchecked(&stage, u, d, &mut k2, &mut scratch);
    for i in 0..n {
        stage[i] = x[i] + 0.5 * dt * k2[i];
    }
    model.eval_dynamics_unchecked(&stage, u, d, &mut k3, &mut scratch);
    for i in 0..n {
        stage[i] = x[i] + dt * k3[i];
    }
    model.eval_dynamics_unchecked(&stage, u, d, &mut k4, &mut scratch);
    out.clear();
    for i in 0..n {
        out.push(x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
}

/// Rolls the closed loop from `(x0, t0)` to time 0.
///
/// The control comes from `policy`, the disturbance from `strategy`, both
/// sampled once per step. `vf` provides the recorded barrier values and
/// `target` the recorded safety margin.
pub fn simulate(
    model: &ControlAffineModel,
    policy: &Policy,
    strategy: &DisturbanceStrategy,
    vf: &ValueFunction,
    target: &ScalarField,
    x0: &[f64],
    t0: f64,
    dt_sim: f64,
) -> Result<Trajectory, SimError> {
    if !(dt_sim > 0.0) {
        return Err(SimError::BadStepSize(dt_sim));
    }
    let horizon = vf.horizon();
    if !(t0 >= horizon && t0 <= 0.0) {
        return Err(SimError::StartTimeOutOfRange { t0, horizon });
    }
    if let DisturbanceStrategy::Constant(d) = strategy {
        if !model.d_box().contains(d) {
            return Err(SimError::ConstantOutOfBounds);
        }
    }
    target
        .interpolate(x0)
        .map_err(SimError::StartOutOfDomain)?;

    let grid: &Arc<Grid> = vf.grid();
    let mut samples = Vec::new();
    let mut exited = false;
    let mut x = x0.to_vec();
    let mut t = t0;
    let mut next_x = Vec::with_capacity(x.len());
    loop {
        let decision = policy.evaluate(&x, t)?;
        let d = strategy.evaluate(model, &x, t)?;
        let barrier = vf.value_at(&x, t)?;
        let l_here = target.interpolate(&x)?;
        samples.push(Sample {
            t,
            x: x.clone(),
            u: decision.control.clone(),
            d: d.clone(),
            barrier,
            target: l_here,
            mode: decision.mode,
        });
        if t >= 0.0 {
            break;
        }
        let dt = dt_sim.min(-t);
        rk4_step(model, &x, &decision.control, &d, dt, &mut next_x);
        if next_x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFiniteState { t });
        }
        // Wrap periodic coordinates so interpolation stays well-posed on
        // long rollouts.
        for dim in 0..grid.ndim() {
            if grid.periodic()[dim] {
                next_x[dim] = grid.wrap(dim, next_x[dim]);
            }
        }
        if !grid.contains(&next_x) {
            exited = true;
            break;
        }
        std::mem::swap(&mut x, &mut next_x);
        t = (t + dt).min(0.0);
        if t > -1e-12 {
            t = 0.0;
        }
    }
    Ok(Trajectory {
        samples,
        dt_sim,
        exited_domain: exited,
    })
}

/// Distance in the leading `target_center.len()` state dimensions, with
/// periodic dimensions compared modulo their period.
fn target_distance(grid: &Grid, x: &[f64], center: &[f64]) -> f64 {
    let mut sq = 0.0;
    for (dim, &c) in center.iter().enumerate() {
        let mut diff = x[dim] - c;
        if grid.periodic()[dim] {
            let period = grid.period(dim);
            diff = (diff + 0.5 * period).rem_euclid(period) - 0.5 * period;
        }
        sq += diff * diff;
    }
    sq.sqrt()
}

/// Aggregates a trajectory into safety metrics. The goal test uses only the
/// leading `target_center.len()` dimensions (a planar goal for a 3-state
/// vehicle checks position, not heading); `relaxation_count` is supplied by
/// the caller from the policy's tally.
pub fn trajectory_metrics(
    traj: &Trajectory,
    target_center: &[f64],
    target_radius: f64,
    grid: &Grid,
    relaxation_count: usize,
) -> Result<Metrics, SimError> {
    if traj.samples.is_empty() {
        return Err(SimError::EmptyTrajectory);
    }
    let mut min_target = f64::INFINITY;
    let mut min_barrier = f64::INFINITY;
    let mut reached = false;
    let mut effort = 0.0;
    for s in &traj.samples {
        min_target = min_target.min(s.target);
        min_barrier = min_barrier.min(s.barrier);
        if target_distance(grid, &s.x, target_center) <= target_radius {
            reached = true;
        }
        effort += s.u.iter().map(|&u| u * u).sum::<f64>() * traj.dt_sim;
    }
    Ok(Metrics {
        min_target,
        min_barrier,
        target_reached: reached,
        final_state: traj.samples.last().unwrap().x.clone(),
        control_effort: effort,
        relaxation_count,
        exited_domain: traj.exited_domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::constant_reference;
    use crate::grid::GridSpec;
    use crate::solver::{solve_cbvf, SolveConfig};

    fn di_setup() -> (ControlAffineModel, Arc<ValueFunction>, ScalarField) {
        let m = ControlAffineModel::double_integrator();
        let g = Grid::new(GridSpec::rectangular(
            vec![-1.0, -2.0],
            vec![5.0, 2.0],
            vec![61, 61],
        ))
        .unwrap()
        .into_shared();
        let l = ScalarField::from_fn(g, |x| {
            (x[0] + 1.0).min(5.0 - x[0]).min(x[1] + 2.0).min(2.0 - x[1])
        })
        .unwrap();
        let vf = Arc::new(solve_cbvf(&m, &l, &SolveConfig::new(0.2, -2.0)).unwrap());
        (m, vf, l)
    }

    #[test]
    fn zero_policy_ballistic_motion() {
        let (m, vf, l) = di_setup();
        let zero = constant_reference(&m, vec![0.0]).unwrap();
        let traj = simulate(
            &m,
            &zero,
            &DisturbanceStrategy::Zero,
            &vf,
            &l,
            &[0.0, 1.0],
            -0.1,
            0.1,
        )
        .unwrap();
        // dz = v, dv = 0: exactly one step of drift; RK4 is exact here.
        assert_eq!(traj.samples.len(), 2);
        let last = &traj.samples[1].x;
        assert!((last[0] - 0.1).abs() < 1e-12);
        assert!((last[1] - 1.0).abs() < 1e-12);
        assert!(!traj.exited_domain);
    }

    #[test]
    fn static_dynamics_hold_state() {
        let m = ControlAffineModel::single_integrator_1d(0.0, 0.0).unwrap();
        let g = Grid::new(GridSpec::rectangular(vec![-2.0], vec![2.0], vec![41]))
            .unwrap()
            .into_shared();
        let l = ScalarField::from_fn(g, |x| 1.0 - x[0].abs()).unwrap();
        let vf = Arc::new(solve_cbvf(&m, &l, &SolveConfig::new(0.0, -1.0)).unwrap());
        let zero = constant_reference(&m, vec![0.0]).unwrap();
        let traj = simulate(
            &m,
            &zero,
            &DisturbanceStrategy::Zero,
            &vf,
            &l,
            &[0.4],
            -1.0,
            0.05,
        )
        .unwrap();
        assert!(traj.samples.iter().all(|s| (s.x[0] - 0.4).abs() < 1e-15));
        assert!((traj.samples.last().unwrap().t - 0.0).abs() < 1e-12);
    }

    #[test]
    fn rk4_endpoint_error_order() {
        // A control held constant across steps is compatible with the
        // zero-order hold, so the integrator's own order is observable.
        // The turning unicycle is nonlinear in the state and has an exact
        // circular-arc solution. (Closed-loop feedback under the hold is
        // first-order by construction; that is a sampling effect, not an
        // integrator property.)
        let m = ControlAffineModel::dubins_car(1.0).unwrap();
        let u = [2.0];
        let arc = |t: f64| {
            // From (0, 0, 0): x = sin(ut)/u, y = (1 - cos(ut))/u, th = ut.
            [
                (u[0] * t).sin() / u[0],
                (1.0 - (u[0] * t).cos()) / u[0],
                u[0] * t,
            ]
        };
        let endpoint = |dt: f64| {
            let mut x = vec![0.0, 0.0, 0.0];
            let mut t = 0.0;
            let mut next = Vec::new();
            while t < 1.0 - 1e-12 {
                let step = dt.min(1.0 - t);
                rk4_step(&m, &x, &u, &[], step, &mut next);
                std::mem::swap(&mut x, &mut next);
                t += step;
            }
            x
        };
        let err = |dt: f64| {
            let x = endpoint(dt);
            let want = arc(1.0);
            x.iter()
                .zip(&want)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let coarse = err(0.04);
        let fine = err(0.02);
        assert!(
            coarse / fine >= 12.0,
            "RK4 refinement ratio {} (coarse {coarse}, fine {fine})",
            coarse / fine
        );
    }

    #[test]
    fn worst_case_follows_gradient_sign() {
        let (m, vf, _) = di_setup();
        let strat = worst_case_disturbance(vf.clone(), &m).unwrap();
        // Gradient of B along z is positive in the interior left half, so
        // the adversary pushes z down.
        let d = strat.evaluate(&m, &[2.0, 0.0], -1.0).unwrap();
        let grad = vf.gradient_at(&[2.0, 0.0], -1.0).unwrap();
        if grad[0] > 0.0 {
            assert_eq!(d, vec![-0.2]);
        } else if grad[0] < 0.0 {
            assert_eq!(d, vec![0.2]);
        }
    }

    #[test]
    fn worst_case_requires_disturbance_channel() {
        let m = ControlAffineModel::dubins_car(1.0).unwrap();
        let g = Grid::new(GridSpec::new(
            vec![-4.0, -4.0, 0.0],
            vec![4.0, 4.0, 2.0 * std::f64::consts::PI],
            vec![11, 11, 12],
            vec![false, false, true],
        ))
        .unwrap()
        .into_shared();
        let l = ScalarField::from_fn(g, |x| x[0] * x[0] + x[1] * x[1] - 1.0).unwrap();
        let vf = Arc::new(solve_cbvf(&m, &l, &SolveConfig::new(0.0, -0.5)).unwrap());
        assert!(matches!(
            worst_case_disturbance(vf, &m),
            Err(SimError::NoDisturbanceChannel)
        ));
    }

    #[test]
    fn domain_exit_flag_not_error() {
        let (m, vf, l) = di_setup();
        // Full push right from near the right edge exits the grid.
        let push = constant_reference(&m, vec![0.5]).unwrap();
        let traj = simulate(
            &m,
            &push,
            &DisturbanceStrategy::Constant(vec![0.2]),
            &vf,
            &l,
            &[4.9, 1.9],
            -2.0,
            0.05,
        )
        .unwrap();
        assert!(traj.exited_domain);
        assert!(!traj.samples.is_empty());
    }

    #[test]
    fn metrics_aggregate_and_goal_test() {
        let (m, vf, l) = di_setup();
        let zero = constant_reference(&m, vec![0.0]).unwrap();
        let traj = simulate(
            &m,
            &zero,
            &DisturbanceStrategy::Zero,
            &vf,
            &l,
            &[1.0, 0.5],
            -1.0,
            0.05,
        )
        .unwrap();
        let metrics =
            trajectory_metrics(&traj, &[1.5, 0.5], 0.2, vf.grid(), 0).unwrap();
        assert!(metrics.target_reached, "passes through (1.5, 0.5)");
        assert!(metrics.control_effort.abs() < 1e-15);
        assert!(metrics.min_target <= traj.samples[0].target);
        let metrics_far = trajectory_metrics(&traj, &[4.0, 0.0], 0.2, vf.grid(), 0).unwrap();
        assert!(!metrics_far.target_reached);
    }

    #[test]
    fn periodic_goal_distance_wraps() {
        let g = Grid::new(GridSpec::new(
            vec![0.0],
            vec![2.0 * std::f64::consts::PI],
            vec![16],
            vec![true],
        ))
        .unwrap();
        let d = target_distance(&g, &[0.1], &[2.0 * std::f64::consts::PI - 0.1]);
        assert!((d - 0.2).abs() < 1e-12, "wrapped distance {d}");
    }

    #[test]
    fn start_time_validation() {
        let (m, vf, l) = di_setup();
        let zero = constant_reference(&m, vec![0.0]).unwrap();
        assert!(matches!(
            simulate(&m, &zero, &DisturbanceStrategy::Zero, &vf, &l, &[0.0, 0.0], -3.0, 0.05),
            Err(SimError::StartTimeOutOfRange { .. })
        ));
        assert!(matches!(
            simulate(&m, &zero, &DisturbanceStrategy::Zero, &vf, &l, &[9.0, 0.0], -1.0, 0.05),
            Err(SimError::StartOutOfDomain(_))
        ));
    }
}
