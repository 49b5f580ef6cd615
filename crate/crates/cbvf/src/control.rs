//! Safe controllers synthesized from a value function.
//!
//! Four controllers are provided:
//!
//! * the pure maximin policy (bang-bang on the interpolated gradient),
//! * the least-restrictive switch (reference until the value drops to a
//!   margin, then maximin),
//! * the min-norm QP filter on the time-varying value function, which keeps
//!   the decay constraint `dB/dt >= -gamma B` while staying as close as
//!   possible to a reference control, and
//! * the time-invariant variant of the same filter built on the stationary
//!   infinite-horizon value.
//!
//! The QP is tiny (at most four control channels) and is solved exactly by
//! enumerating active sets, with a KKT certificate checked on the winner.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::grid::{GridError, ScalarField};
use crate::model::{BoxBounds, ControlAffineModel};
use crate::solver::{ValueFunction, ValueQueryError};

#[derive(Debug, Error)]
pub enum QpError {
    #[error("QP infeasible: best box vertex leaves constraint slack {slack}")]
    Infeasible { slack: f64 },
    #[error("QP sized inconsistently: u_ref {u_ref}, lin {lin}, box {bounds} channels")]
    SizeMismatch { u_ref: usize, lin: usize, bounds: usize },
    #[error("KKT certificate failed with residual {residual}")]
    KktFailure { residual: f64 },
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Value(#[from] ValueQueryError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Error)]
pub enum PolicyBuildError {
    #[error("value function was solved with gamma {vf_gamma}, controller asked for {gamma}")]
    GammaMismatch { vf_gamma: f64, gamma: f64 },
    #[error("value function was solved for model '{vf_model}', controller got '{model}'")]
    ModelMismatch { vf_model: String, model: String },
    #[error("reference controller needs {expected} state dimensions, model has {got}")]
    StateDimMismatch { expected: usize, got: usize },
    #[error("constant reference control lies outside the control box")]
    ReferenceOutOfBounds,
}

/// One evaluation of the min-norm safety filter:
/// minimize `||u - u_ref||^2` subject to `offset + lin . u >= 0` and box
/// bounds on `u`.
#[derive(Debug, Clone)]
pub struct QpInstance {
    pub u_ref: Vec<f64>,
    pub lin: Vec<f64>,
    pub offset: f64,
    pub bounds: BoxBounds,
}

/// Slack of the half-space constraint at `u`.
fn constraint_slack(qp: &QpInstance, u: &[f64]) -> f64 {
    qp.offset + qp.lin.iter().zip(u).map(|(&a, &b)| a * b).sum::<f64>()
}

fn cost(qp: &QpInstance, u: &[f64]) -> f64 {
    u.iter()
        .zip(&qp.u_ref)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum()
}

/// Exact minimizer of the min-norm QP by active-set enumeration.
///
/// The unconstrained-within-box candidate (the clamped reference) wins when
/// it already satisfies the half-space; otherwise the half-space is active at
/// the optimum, and for each of the `3^m` box-face patterns the free channels
/// are projected onto the constraint hyperplane. The best feasible candidate
/// is certified by a KKT check before being returned.
pub fn solve_min_norm_qp(qp: &QpInstance) -> Result<Vec<f64>, QpError> {
    let m = qp.bounds.channels();
    if qp.u_ref.len() != m || qp.lin.len() != m {
        return Err(QpError::SizeMismatch {
            u_ref: qp.u_ref.len(),
            lin: qp.lin.len(),
            bounds: m,
        });
    }
    if m == 0 {
        return if qp.offset >= 0.0 {
            Ok(Vec::new())
        } else {
            Err(QpError::Infeasible { slack: qp.offset })
        };
    }
    let scale: f64 = 1.0
        + qp.offset.abs()
        + qp.lin
            .iter()
            .enumerate()
            .map(|(j, &l)| l.abs() * qp.bounds.max()[j].abs().max(qp.bounds.min()[j].abs()))
            .sum::<f64>();
    let feas_tol = 1e-12 * scale;

    // Feasibility: the most favorable vertex.
    let best_vertex_slack = qp.offset
        + qp.lin
            .iter()
            .enumerate()
            .map(|(j, &l)| (l * qp.bounds.min()[j]).max(l * qp.bounds.max()[j]))
            .sum::<f64>();
    if best_vertex_slack < -feas_tol {
        return Err(QpError::Infeasible {
            slack: best_vertex_slack,
        });
    }

    // Candidate: box projection of the reference.
    let mut clamped = qp.u_ref.clone();
    qp.bounds.clamp(&mut clamped);
    let mut best: Option<(f64, Vec<f64>)> = None;
    if constraint_slack(qp, &clamped) >= -feas_tol {
        best = Some((cost(qp, &clamped), clamped));
    }

    // Candidates with the half-space active: enumerate free/min/max patterns.
    let mut u = vec![0.0; m];
    let patterns = 3usize.pow(m as u32);
    'patterns: for code in 0..patterns {
        let mut rhs = -qp.offset;
        let mut free: [usize; 4] = [0; 4];
        let mut n_free = 0;
        let mut c = code;
        for j in 0..m {
            match c % 3 {
                0 => {
                    free[n_free] = j;
                    n_free += 1;
                }
                1 => {
                    u[j] = qp.bounds.min()[j];
                    rhs -= qp.lin[j] * u[j];
                }
                _ => {
                    u[j] = qp.bounds.max()[j];
                    rhs -= qp.lin[j] * u[j];
                }
            }
            c /= 3;
        }
        let free = &free[..n_free];
        let norm_sq: f64 = free.iter().map(|&j| qp.lin[j] * qp.lin[j]).sum();
        if norm_sq == 0.0 {
            if n_free > 0 {
                // Constraint independent of the free channels: equality only
                // holds if the fixed part already closes it.
                if rhs.abs() > feas_tol {
                    continue;
                }
                for &j in free {
                    u[j] = qp.u_ref[j];
                }
            }
            // All-fixed vertex (or rhs-neutral free set): plain candidate.
        } else {
            let along: f64 = free.iter().map(|&j| qp.lin[j] * qp.u_ref[j]).sum();
            let lambda = (rhs - along) / norm_sq;
            for &j in free {
                u[j] = qp.u_ref[j] + lambda * qp.lin[j];
            }
        }
        // Free channels must respect their bounds for the pattern to be
        // meaningful; allow round-off overhang, then pin exactly.
        for &j in free {
            let (lo, hi) = (qp.bounds.min()[j], qp.bounds.max()[j]);
            if u[j] < lo - feas_tol || u[j] > hi + feas_tol {
                continue 'patterns;
            }
            u[j] = u[j].clamp(lo, hi);
        }
        if constraint_slack(qp, &u) < -feas_tol {
            continue;
        }
        let c = cost(qp, &u);
        match &best {
            Some((bc, _)) if *bc <= c => {}
            _ => best = Some((c, u.clone())),
        }
    }

    let (_, winner) = best.ok_or(QpError::Infeasible {
        slack: best_vertex_slack,
    })?;
    let residual = kkt_residual(qp, &winner);
    if residual > 1e-8 * scale {
        return Err(QpError::KktFailure { residual });
    }
    Ok(winner)
}

/// Worst violation of the KKT conditions at `u` for the best admissible
/// half-space multiplier: stationarity `2(u - u_ref) = lambda lin + box
/// multipliers` with `lambda >= 0` and complementary slackness. Zero (to
/// round-off) certifies optimality.
pub fn kkt_residual(qp: &QpInstance, u: &[f64]) -> f64 {
    let m = qp.bounds.channels();
    let scale: f64 = 1.0 + qp.offset.abs();
    let act_tol = 1e-9 * scale;
    let slack = constraint_slack(qp, u);

    let violation_for = |lambda: f64| -> f64 {
        let mut worst = (-slack).max(0.0).max(-lambda);
        if slack > act_tol {
            // Complementary slackness away from the constraint boundary.
            worst = worst.max(lambda.abs() * slack / scale);
        }
        for j in 0..m {
            worst = worst
                .max(qp.bounds.min()[j] - u[j])
                .max(u[j] - qp.bounds.max()[j]);
            let grad = 2.0 * (u[j] - qp.u_ref[j]) - lambda * qp.lin[j];
            let at_min = u[j] <= qp.bounds.min()[j] + act_tol;
            let at_max = u[j] >= qp.bounds.max()[j] - act_tol;
            if at_min && at_max {
                // Pinched channel: the bound pair absorbs any gradient.
            } else if at_min {
                worst = worst.max(-grad); // mu_min = grad must be >= 0
            } else if at_max {
                worst = worst.max(grad); // mu_max = -grad must be >= 0
            } else {
                worst = worst.max(grad.abs());
            }
        }
        worst
    };

    // When no channel is strictly interior, stationarity does not pin the
    // multiplier; try every breakpoint where a channel condition flips.
    let mut candidates = [0.0f64; 2 * crate::grid::MAX_DIMS + 2];
    let mut n_cand = 0;
    let mut push = |v: f64| {
        if v.is_finite() && v >= 0.0 {
            candidates[n_cand] = v;
            n_cand += 1;
        }
    };
    push(0.0);
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..m {
        if qp.lin[j] != 0.0 {
            push(2.0 * (u[j] - qp.u_ref[j]) / qp.lin[j]);
        }
        let interior = u[j] > qp.bounds.min()[j] + act_tol && u[j] < qp.bounds.max()[j] - act_tol;
        if interior {
            num += 2.0 * (u[j] - qp.u_ref[j]) * qp.lin[j];
            den += qp.lin[j] * qp.lin[j];
        }
    }
    if den > 0.0 {
        push(num / den);
    }
    candidates[..n_cand]
        .iter()
        .map(|&l| violation_for(l))
        .fold(f64::INFINITY, f64::min)
}

/// Constraint pieces of the time-varying safety filter at `(x, t)`:
/// `offset = D_t B + grad . p(x) + min_d grad . r(x) d + gamma B` and
/// `lin = grad . q(x)`, all from interpolated quantities.
pub fn qp_constraint_terms(
    vf: &ValueFunction,
    model: &ControlAffineModel,
    gamma: f64,
    x: &[f64],
    t: f64,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let n_x = model.state_dim();
    let mut grad = vec![0.0; n_x];
    vf.gradient_into(x, t, &mut grad)?;
    let dt_b = vf.time_slope_at(x, t)?;
    let barrier = vf.value_at(x, t)?;
    Ok(assemble_constraint(
        model, &grad, dt_b, barrier, gamma, x,
    ))
}

fn assemble_constraint(
    model: &ControlAffineModel,
    grad: &[f64],
    dt_b: f64,
    barrier: f64,
    gamma: f64,
    x: &[f64],
) -> (f64, Vec<f64>) {
    let n_x = model.state_dim();
    let n_u = model.control_dim();
    let n_d = model.disturbance_dim();
    let mut p = vec![0.0; n_x];
    model.drift_into(x, &mut p);
    let mut offset = dt_b + gamma * barrier;
    offset += grad.iter().zip(&p).map(|(&a, &b)| a * b).sum::<f64>();
    if n_d > 0 {
        let mut r = vec![0.0; n_x * n_d];
        model.disturbance_matrix_into(x, &mut r);
        for j in 0..n_d {
            let c: f64 = (0..n_x).map(|i| grad[i] * r[i * n_d + j]).sum();
            offset += if c >= 0.0 {
                c * model.d_box().min()[j]
            } else {
                c * model.d_box().max()[j]
            };
        }
    }
    let mut lin = vec![0.0; n_u];
    if n_u > 0 {
        let mut q = vec![0.0; n_x * n_u];
        model.control_matrix_into(x, &mut q);
        for (j, l) in lin.iter_mut().enumerate() {
            *l = (0..n_x).map(|i| grad[i] * q[i * n_u + j]).sum();
        }
    }
    (offset, lin)
}

/// Which controller produced a control sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Reference,
    Optimal,
    LeastRestrictive,
    CbvfQp,
    CbfQp,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Reference => "reference",
            PolicyKind::Optimal => "optimal",
            PolicyKind::LeastRestrictive => "least_restrictive",
            PolicyKind::CbvfQp => "cbvf_qp",
            PolicyKind::CbfQp => "cbf_qp",
        }
    }
}

/// A control decision together with the branch that produced it (the
/// least-restrictive policy reports which side of the switch fired).
#[derive(Debug, Clone)]
pub struct PolicyDecision {
    pub control: Vec<f64>,
    pub mode: PolicyKind,
}

type PolicyFn = dyn Fn(&[f64], f64) -> Result<PolicyDecision, PolicyError> + Send + Sync;

/// State-time feedback controller. Policies capture immutable value
/// functions and models; evaluation is pure. QP-backed policies count their
/// numerical relaxation events in a shared tally.
#[derive(Clone)]
pub struct Policy {
    kind: PolicyKind,
    evaluator: Arc<PolicyFn>,
    relaxations: Arc<AtomicUsize>,
}

impl std::fmt::Debug for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Policy").field("kind", &self.kind).finish()
    }
}

impl Policy {
    pub fn from_fn(
        kind: PolicyKind,
        f: impl Fn(&[f64], f64) -> Result<PolicyDecision, PolicyError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            kind,
            evaluator: Arc::new(f),
            relaxations: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn evaluate(&self, x: &[f64], t: f64) -> Result<PolicyDecision, PolicyError> {
        (self.evaluator)(x, t)
    }

    /// How many times a QP-backed policy needed the numerical feasibility
    /// relaxation. Always zero for other kinds.
    pub fn relaxation_count(&self) -> usize {
        self.relaxations.load(Ordering::Relaxed)
    }
}

/// PD position reference for two-state (position, velocity) models:
/// `u = clamp(-kp (z - goal) - kd v)`.
pub fn pd_position_reference(
    model: &ControlAffineModel,
    kp: f64,
    kd: f64,
    goal_position: f64,
) -> Result<Policy, PolicyBuildError> {
    if model.state_dim() != 2 || model.control_dim() != 1 {
        return Err(PolicyBuildError::StateDimMismatch {
            expected: 2,
            got: model.state_dim(),
        });
    }
    let bounds = model.u_box().clone();
    Ok(Policy::from_fn(PolicyKind::Reference, move |x, _t| {
        let mut u = vec![-kp * (x[0] - goal_position) - kd * x[1]];
        bounds.clamp(&mut u);
        Ok(PolicyDecision {
            control: u,
            mode: PolicyKind::Reference,
        })
    }))
}

/// Proportional heading reference for planar unicycle-type models: steer
/// toward `goal_xy` with `u = clamp(gain * wrapped(bearing - heading))`.
pub fn heading_reference(
    model: &ControlAffineModel,
    gain: f64,
    goal_xy: [f64; 2],
) -> Result<Policy, PolicyBuildError> {
    if model.state_dim() != 3 || model.control_dim() != 1 {
        return Err(PolicyBuildError::StateDimMismatch {
            expected: 3,
            got: model.state_dim(),
        });
    }
    let bounds = model.u_box().clone();
    Ok(Policy::from_fn(PolicyKind::Reference, move |x, _t| {
        let bearing = (goal_xy[1] - x[1]).atan2(goal_xy[0] - x[0]);
        let mut err = bearing - x[2];
        while err > std::f64::consts::PI {
            err -= 2.0 * std::f64::consts::PI;
        }
        while err < -std::f64::consts::PI {
            err += 2.0 * std::f64::consts::PI;
        }
        let mut u = vec![gain * err];
        bounds.clamp(&mut u);
        Ok(PolicyDecision {
            control: u,
            mode: PolicyKind::Reference,
        })
    }))
}

/// Constant reference control (zero is the usual choice).
pub fn constant_reference(
    model: &ControlAffineModel,
    u: Vec<f64>,
) -> Result<Policy, PolicyBuildError> {
    if !model.u_box().contains(&u) {
        return Err(PolicyBuildError::ReferenceOutOfBounds);
    }
    Ok(Policy::from_fn(PolicyKind::Reference, move |_x, _t| {
        Ok(PolicyDecision {
            control: u.clone(),
            mode: PolicyKind::Reference,
        })
    }))
}

fn check_vf_model(
    vf: &ValueFunction,
    model: &ControlAffineModel,
    gamma: Option<f64>,
) -> Result<(), PolicyBuildError> {
    if vf.model_name() != model.name() {
        return Err(PolicyBuildError::ModelMismatch {
            vf_model: vf.model_name().to_string(),
            model: model.name().to_string(),
        });
    }
    if let Some(g) = gamma {
        if (vf.gamma() - g).abs() > 1e-12 {
            return Err(PolicyBuildError::GammaMismatch {
                vf_gamma: vf.gamma(),
                gamma: g,
            });
        }
    }
    Ok(())
}

/// The pure maximin controller: bang-bang on the interpolated gradient of
/// the value function. Used directly for the classical optimal policy and as
/// the fallback of the least-restrictive switch.
pub fn optimal_safe_policy(
    vf: Arc<ValueFunction>,
    model: ControlAffineModel,
) -> Result<Policy, PolicyBuildError> {
    check_vf_model(&vf, &model, None)?;
    Ok(Policy::from_fn(PolicyKind::Optimal, move |x, t| {
        let grad = vf.gradient_at(x, t)?;
        let (u, _) = model.bang_bang_inputs(x, &grad);
        Ok(PolicyDecision {
            control: u,
            mode: PolicyKind::Optimal,
        })
    }))
}

/// Reference control while the value exceeds `epsilon`, maximin otherwise.
pub fn least_restrictive_policy(
    vf: Arc<ValueFunction>,
    model: ControlAffineModel,
    reference: Policy,
    epsilon: f64,
) -> Result<Policy, PolicyBuildError> {
    check_vf_model(&vf, &model, None)?;
    let safe = optimal_safe_policy(vf.clone(), model)?;
    Ok(Policy {
        kind: PolicyKind::LeastRestrictive,
        evaluator: Arc::new(move |x: &[f64], t: f64| {
            let barrier = vf.value_at(x, t)?;
            let decision = if barrier > epsilon {
                reference.evaluate(x, t)?
            } else {
                safe.evaluate(x, t)?
            };
            Ok(PolicyDecision {
                control: decision.control,
                mode: decision.mode,
            })
        }),
        relaxations: Arc::new(AtomicUsize::new(0)),
    })
}

/// Default switching margin for the least-restrictive policy: two cells of
/// the coarsest axis times the steepest slope of the horizon slice.
pub fn default_switch_margin(vf: &ValueFunction) -> f64 {
    let slice = vf.slices().last().unwrap();
    let mut slope: f64 = 0.0;
    for dim in 0..vf.grid().ndim() {
        let (dm, _) = slice
            .upwind_derivatives(dim)
            .expect("dimension within bounds");
        slope = slope.max(dm.values().iter().fold(0.0f64, |a, &b| a.max(b.abs())));
    }
    let max_dx = vf.grid().dx().iter().fold(0.0f64, |a, &b| a.max(b));
    2.0 * max_dx * slope
}

fn qp_filter_decision(
    qp: QpInstance,
    kind: PolicyKind,
    relaxations: &AtomicUsize,
) -> Result<PolicyDecision, PolicyError> {
    match solve_min_norm_qp(&qp) {
        Ok(control) => Ok(PolicyDecision { control, mode: kind }),
        Err(QpError::Infeasible { slack }) => {
            // Feasibility holds wherever the gradient exists; numerical
            // infeasibility is discretization noise near kinks. Relax by the
            // slack that makes the best vertex feasible and count the event.
            relaxations.fetch_add(1, Ordering::Relaxed);
            let relaxed = QpInstance {
                offset: qp.offset - slack * (1.0 + 1e-9) + 1e-15,
                ..qp
            };
            let control = solve_min_norm_qp(&relaxed)?;
            Ok(PolicyDecision { control, mode: kind })
        }
        Err(e) => Err(e.into()),
    }
}

/// Min-norm filter on the time-varying value function: projects the
/// reference control onto the decay constraint
/// `D_t B + grad . f(x, u, d_worst) + gamma B >= 0`.
pub fn cbvf_qp_policy(
    vf: Arc<ValueFunction>,
    model: ControlAffineModel,
    gamma: f64,
    reference: Policy,
) -> Result<Policy, PolicyBuildError> {
    check_vf_model(&vf, &model, Some(gamma))?;
    let relaxations = Arc::new(AtomicUsize::new(0));
    let tally = relaxations.clone();
    Ok(Policy {
        kind: PolicyKind::CbvfQp,
        evaluator: Arc::new(move |x: &[f64], t: f64| {
            let (offset, lin) = qp_constraint_terms(&vf, &model, gamma, x, t)?;
            let u_ref = reference.evaluate(x, t)?.control;
            let qp = QpInstance {
                u_ref,
                lin,
                offset,
                bounds: model.u_box().clone(),
            };
            qp_filter_decision(qp, PolicyKind::CbvfQp, &tally)
        }),
        relaxations,
    })
}

/// Time-invariant min-norm filter on a stationary value function; the decay
/// constraint drops the time-derivative term.
pub fn cbf_qp_policy(
    v_inf: ScalarField,
    model: ControlAffineModel,
    gamma: f64,
    reference: Policy,
) -> Policy {
    let relaxations = Arc::new(AtomicUsize::new(0));
    let tally = relaxations.clone();
    Policy {
        kind: PolicyKind::CbfQp,
        evaluator: Arc::new(move |x: &[f64], _t: f64| {
            let mut grad = vec![0.0; model.state_dim()];
            v_inf.gradient_into(x, &mut grad)?;
            let barrier = v_inf.interpolate(x)?;
            let (offset, lin) = assemble_constraint(&model, &grad, 0.0, barrier, gamma, x);
            let u_ref = reference.evaluate(x, 0.0)?.control;
            let qp = QpInstance {
                u_ref,
                lin,
                offset,
                bounds: model.u_box().clone(),
            };
            qp_filter_decision(qp, PolicyKind::CbfQp, &tally)
        }),
        relaxations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, GridSpec};
    use crate::solver::{solve_cbvf, SolveConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qp(u_ref: &[f64], lin: &[f64], offset: f64, lo: &[f64], hi: &[f64]) -> QpInstance {
        QpInstance {
            u_ref: u_ref.to_vec(),
            lin: lin.to_vec(),
            offset,
            bounds: BoxBounds::new(lo.to_vec(), hi.to_vec()).unwrap(),
        }
    }

    /// Pure grid scan at fixed resolution: the best feasible grid point. Its
    /// position error along the constraint surface is quantization-limited,
    /// so it certifies cost dominance rather than 1e-4 positions.
    fn grid_scan_qp(qp: &QpInstance, points: usize) -> Option<Vec<f64>> {
        let m = qp.bounds.channels();
        let lo = qp.bounds.min();
        let hi = qp.bounds.max();
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut idx = vec![0usize; m];
        let mut u = vec![0.0; m];
        'scan: loop {
            for j in 0..m {
                u[j] = lo[j] + (hi[j] - lo[j]) * idx[j] as f64 / (points - 1) as f64;
            }
            if constraint_slack(qp, &u) >= 0.0 {
                let c = cost(qp, &u);
                if best.as_ref().map_or(true, |(bc, _)| c < *bc) {
                    best = Some((c, u.clone()));
                }
            }
            let mut j = m;
            loop {
                if j == 0 {
                    break 'scan;
                }
                j -= 1;
                idx[j] += 1;
                if idx[j] < points {
                    break;
                }
                idx[j] = 0;
            }
        }
        best.map(|(_, u)| u)
    }

    /// Independent exact route: by duality the optimum is
    /// `clamp_box(u_ref + (lambda/2) lin)` with the smallest `lambda >= 0`
    /// that satisfies the half-space; the slack is nondecreasing in lambda,
    /// so bisection nails it. No active sets, no equality projections.
    fn dual_bisection_qp(qp: &QpInstance) -> Option<Vec<f64>> {
        let u_of = |lambda: f64| -> Vec<f64> {
            let mut u: Vec<f64> = qp
                .u_ref
                .iter()
                .zip(&qp.lin)
                .map(|(&r, &l)| r + 0.5 * lambda * l)
                .collect();
            qp.bounds.clamp(&mut u);
            u
        };
        if constraint_slack(qp, &u_of(0.0)) >= 0.0 {
            return Some(u_of(0.0));
        }
        let mut hi = 1.0;
        while constraint_slack(qp, &u_of(hi)) < 0.0 {
            hi *= 2.0;
            if hi > 1e18 {
                return None; // infeasible
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if constraint_slack(qp, &u_of(mid)) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(u_of(hi))
    }

    #[test]
    fn qp_active_constraint_hand_case() {
        // Constraint u >= 0.2 pushes the reference up to the boundary.
        let p = qp(&[0.0], &[1.0], -0.2, &[-0.5], &[0.5]);
        let u = solve_min_norm_qp(&p).unwrap();
        assert!((u[0] - 0.2).abs() < 1e-12, "got {}", u[0]);
        // Agreement to one step of the hundred-thousand-point scan.
        let b = grid_scan_qp(&p, 100_001).unwrap();
        assert!((u[0] - b[0]).abs() <= 1.1e-5);
    }

    #[test]
    fn qp_interior_reference_passes_through() {
        let p = qp(&[0.1], &[0.3], 1.0, &[-0.5], &[0.5]);
        let u = solve_min_norm_qp(&p).unwrap();
        assert_eq!(u, vec![0.1]);
    }

    #[test]
    fn qp_infeasible_reports_best_vertex_slack() {
        let p = qp(&[0.0], &[1.0], -1.0, &[-0.5], &[0.5]);
        match solve_min_norm_qp(&p) {
            Err(QpError::Infeasible { slack }) => assert!((slack + 0.5).abs() < 1e-12),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn qp_zero_channels() {
        let p = QpInstance {
            u_ref: vec![],
            lin: vec![],
            offset: 0.5,
            bounds: BoxBounds::empty(),
        };
        assert!(solve_min_norm_qp(&p).unwrap().is_empty());
    }

    #[test]
    fn qp_matches_brute_force_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut solved = 0;
        for _ in 0..150 {
            let m = rng.gen_range(1..=2usize);
            let mut lo = vec![0.0; m];
            let mut hi = vec![0.0; m];
            for j in 0..m {
                let a: f64 = rng.gen_range(-2.0..2.0);
                let b: f64 = rng.gen_range(-2.0..2.0);
                lo[j] = a.min(b);
                hi[j] = a.max(b) + 0.1;
            }
            let u_ref: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lin: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let offset = rng.gen_range(-2.0..2.0);
            let p = qp(&u_ref, &lin, offset, &lo, &hi);
            match solve_min_norm_qp(&p) {
                Ok(u) => {
                    solved += 1;
                    assert!(p.bounds.contains(&u), "box violated");
                    assert!(constraint_slack(&p, &u) >= -1e-9);
                    assert!(kkt_residual(&p, &u) <= 1e-8);
                    let d = dual_bisection_qp(&p).expect("dual route disagrees on feasibility");
                    for j in 0..m {
                        assert!(
                            (u[j] - d[j]).abs() < 1e-4,
                            "channel {j}: solver {} vs dual {}",
                            u[j],
                            d[j]
                        );
                    }
                    // The grid scan cannot certify positions along the
                    // constraint surface, but the solver must never lose on
                    // cost against any feasible grid point.
                    let g = grid_scan_qp(&p, 201).expect("solver feasible but scan found none");
                    assert!(cost(&p, &u) <= cost(&p, &g) + 1e-9);
                }
                Err(QpError::Infeasible { .. }) => {
                    assert!(grid_scan_qp(&p, 201).is_none());
                    assert!(dual_bisection_qp(&p).is_none());
                }
                Err(e) => panic!("unexpected error {e:?}"),
            }
        }
        assert!(solved > 50, "too few feasible draws ({solved})");
    }

    /// Value function that is constant in time with a prescribed per-node
    /// profile; handy for exercising the constraint assembly.
    fn synthetic_vf(
        profile: impl Fn(&[f64]) -> f64,
        gamma: f64,
        model_name: &str,
        lo: Vec<f64>,
        hi: Vec<f64>,
        n: Vec<usize>,
    ) -> ValueFunction {
        let grid = Grid::new(GridSpec::rectangular(lo, hi, n))
            .unwrap()
            .into_shared();
        let f = ScalarField::from_fn(grid.clone(), |x| profile(x)).unwrap();
        ValueFunction::from_parts(
            grid,
            vec![0.0, -1.0],
            vec![f.clone(), f],
            gamma,
            model_name.into(),
        )
        .unwrap()
    }

    #[test]
    fn constraint_terms_double_integrator_geometry() {
        // Profile z: gradient (1, 0). lin = grad . q = 0; the disturbance
        // term is min over d of grad . r d = -0.2; D_t B = 0 exactly.
        let m = ControlAffineModel::double_integrator();
        let vf = synthetic_vf(
            |x| x[0],
            0.0,
            "double_integrator",
            vec![-1.0, -2.0],
            vec![5.0, 2.0],
            vec![31, 31],
        );
        let (offset, lin) = qp_constraint_terms(&vf, &m, 0.0, &[0.0, 1.0], -0.5).unwrap();
        assert!((lin[0]).abs() < 1e-12);
        // grad . p = (1,0) . (v, 0) = 1, disturbance -0.2, gamma B = 0.
        assert!((offset - 0.8).abs() < 1e-9, "offset {offset}");
    }

    #[test]
    fn constraint_terms_zero_gradient() {
        let m = ControlAffineModel::double_integrator();
        let vf = synthetic_vf(
            |_| 2.0,
            0.3,
            "double_integrator",
            vec![-1.0, -2.0],
            vec![5.0, 2.0],
            vec![31, 31],
        );
        let (offset, lin) = qp_constraint_terms(&vf, &m, 0.3, &[1.0, 0.5], -0.25).unwrap();
        assert!(lin[0].abs() < 1e-12);
        assert!((offset - 0.6).abs() < 1e-9, "offset {offset}"); // gamma * B
    }

    #[test]
    fn cbvf_qp_passes_safe_reference_through() {
        let m = ControlAffineModel::double_integrator();
        let vf = Arc::new(synthetic_vf(
            |_| 5.0,
            1.0,
            "double_integrator",
            vec![-1.0, -2.0],
            vec![5.0, 2.0],
            vec![31, 31],
        ));
        let reference = constant_reference(&m, vec![0.3]).unwrap();
        let policy = cbvf_qp_policy(vf, m, 1.0, reference).unwrap();
        let d = policy.evaluate(&[1.0, 0.0], -0.5).unwrap();
        assert_eq!(d.control, vec![0.3]);
        assert_eq!(policy.relaxation_count(), 0);
    }

    #[test]
    fn cbvf_qp_rejects_mismatched_gamma() {
        let m = ControlAffineModel::double_integrator();
        let vf = Arc::new(synthetic_vf(
            |_| 1.0,
            0.2,
            "double_integrator",
            vec![-1.0, -2.0],
            vec![5.0, 2.0],
            vec![31, 31],
        ));
        let reference = constant_reference(&m, vec![0.0]).unwrap();
        assert!(matches!(
            cbvf_qp_policy(vf, m, 0.5, reference),
            Err(PolicyBuildError::GammaMismatch { .. })
        ));
    }

    #[test]
    fn optimal_policy_follows_gradient_sign() {
        let m = ControlAffineModel::double_integrator();
        // Profile v: gradient (0, 1) -> c_u = 1 -> u at max.
        let vf = Arc::new(synthetic_vf(
            |x| x[1],
            0.0,
            "double_integrator",
            vec![-1.0, -2.0],
            vec![5.0, 2.0],
            vec![31, 31],
        ));
        let policy = optimal_safe_policy(vf.clone(), m.clone()).unwrap();
        let d = policy.evaluate(&[1.0, 0.3], -0.2).unwrap();
        assert_eq!(d.control, vec![0.5]);
        // Flat profile: tie-break at the midpoint.
        let flat = Arc::new(synthetic_vf(
            |_| 1.0,
            0.0,
            "double_integrator",
            vec![-1.0, -2.0],
            vec![5.0, 2.0],
            vec![31, 31],
        ));
        let policy = optimal_safe_policy(flat, m).unwrap();
        let d = policy.evaluate(&[1.0, 0.3], -0.2).unwrap();
        assert_eq!(d.control, vec![0.0]);
    }

    #[test]
    fn least_restrictive_switches_on_value() {
        let m = ControlAffineModel::double_integrator();
        // Value grows with z: safe for large z, switching near small z.
        let vf = Arc::new(synthetic_vf(
            |x| x[0],
            0.0,
            "double_integrator",
            vec![-1.0, -2.0],
            vec![5.0, 2.0],
            vec![31, 31],
        ));
        let reference = constant_reference(&m, vec![-0.25]).unwrap();
        let policy = least_restrictive_policy(vf, m, reference, 0.5).unwrap();
        let deep = policy.evaluate(&[4.0, 0.0], -0.5).unwrap();
        assert_eq!(deep.mode, PolicyKind::Reference);
        assert_eq!(deep.control, vec![-0.25]);
        let near = policy.evaluate(&[0.25, 0.0], -0.5).unwrap();
        assert_eq!(near.mode, PolicyKind::Optimal);
        // Gradient (1, 0): c_u = grad . q = 0 -> midpoint control.
        assert_eq!(near.control, vec![0.0]);
    }

    #[test]
    fn cbf_qp_static_field_passes_reference_on_safe_set() {
        // Static 1D system: constraint reads gamma * V(x) >= 0, no control
        // influence, so the reference passes wherever V >= 0.
        let m = ControlAffineModel::single_integrator_1d(0.0, 0.0).unwrap();
        let grid = Grid::new(GridSpec::rectangular(vec![-2.0], vec![2.0], vec![41]))
            .unwrap()
            .into_shared();
        let v_inf = ScalarField::from_fn(grid, |x| 1.0 - x[0].abs()).unwrap();
        let reference = constant_reference(&m, vec![0.0]).unwrap();
        let policy = cbf_qp_policy(v_inf, m, 0.5, reference);
        let d = policy.evaluate(&[0.5], 0.0).unwrap();
        assert_eq!(d.control, vec![0.0]);
    }

    #[test]
    fn qp_policy_tracks_bang_bang_in_the_pde_region() {
        // Where B < l the constraint is tight at the maximin control, so the
        // filter lands near the bang-bang input regardless of the reference.
        // The disturbance outruns the control (net erosion rate 0.5), so the
        // region with B strictly below l covers most of the grid.
        let m = ControlAffineModel::single_integrator_1d(0.5, 1.0).unwrap();
        let grid = Grid::new(GridSpec::rectangular(vec![-2.0], vec![2.0], vec![201]))
            .unwrap()
            .into_shared();
        let l = ScalarField::from_fn(grid, |x| 1.0 - x[0].abs()).unwrap();
        let mut cfg = SolveConfig::new(0.0, -1.0);
        cfg.store_stride = Some(1);
        let vf = Arc::new(solve_cbvf(&m, &l, &cfg).unwrap());
        let reference = constant_reference(&m, vec![0.0]).unwrap();
        let policy = cbvf_qp_policy(vf.clone(), m.clone(), 0.0, reference).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..200 {
            let x = [rng.gen_range(-1.9..1.9f64)];
            let t = rng.gen_range(-0.9..-0.1f64);
            let b = vf.value_at(&x, t).unwrap();
            let l_x = 1.0 - x[0].abs();
            let grad = vf.gradient_at(&x, t).unwrap();
            // Stay away from the smeared kink and from the clamped region.
            if x[0].abs() < 0.2 || b > l_x - 0.05 || grad[0].abs() < 0.3 {
                continue;
            }
            let (u_star, _) = m.bang_bang_inputs(&x, &grad);
            let u_qp = policy.evaluate(&x, t).unwrap().control;
            assert!(
                (u_qp[0] - u_star[0]).abs() < 0.2,
                "x {:?} t {t}: qp {} vs bang {}",
                x,
                u_qp[0],
                u_star[0]
            );
            checked += 1;
        }
        assert!(checked > 50, "only {checked} informative samples");
    }

    #[test]
    fn policy_outputs_stay_in_the_box() {
        let m = ControlAffineModel::double_integrator();
        let vf = Arc::new(synthetic_vf(
            |x| (x[0] * 1.3).sin() + 0.5 * x[1],
            0.2,
            "double_integrator",
            vec![-1.0, -2.0],
            vec![5.0, 2.0],
            vec![41, 41],
        ));
        let reference = pd_position_reference(&m, 1.0, 1.5, -0.5).unwrap();
        let policies = [
            optimal_safe_policy(vf.clone(), m.clone()).unwrap(),
            least_restrictive_policy(vf.clone(), m.clone(), reference.clone(), 0.3).unwrap(),
            cbvf_qp_policy(vf.clone(), m.clone(), 0.2, reference.clone()).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let x = [rng.gen_range(-1.0..5.0), rng.gen_range(-2.0..2.0)];
            let t = rng.gen_range(-1.0..0.0f64);
            for p in &policies {
                let u = p.evaluate(&x, t).unwrap().control;
                assert!(m.u_box().contains(&u), "{:?} out of box from {:?}", u, p.kind());
            }
        }
    }

    #[test]
    fn heading_reference_wraps_angle() {
        let m = ControlAffineModel::dubins_car(1.0).unwrap();
        let r = heading_reference(&m, 2.0, [1.0, 0.0]).unwrap();
        // Goal dead ahead: no steering.
        let d = r.evaluate(&[0.0, 0.0, 0.0], 0.0).unwrap();
        assert!(d.control[0].abs() < 1e-12);
        // Goal behind, heading just below +pi: wrapped error keeps |u| sane.
        let d = r
            .evaluate(&[2.0, 0.0, 3.0 * std::f64::consts::FRAC_PI_4], 0.0)
            .unwrap();
        assert!(d.control[0].abs() <= 3.0);
    }
}
