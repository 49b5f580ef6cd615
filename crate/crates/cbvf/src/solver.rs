//! Backward-in-time construction of control barrier-value functions.
//!
//! The solver integrates, in backward time tau = -t,
//!
//! ```text
//!   dB/dtau = max_u min_d  D_x B . f(x, u, d)  +  gamma * B
//! ```
//!
//! and enforces the variational-inequality branch `B <= l` by a pointwise
//! minimum with the safety target after every (sub)step. The spatial operator
//! is a first-order monotone local Lax-Friedrichs Hamiltonian; time stepping
//! is explicit Euler or TVD-RK3 under a CFL bound. With `gamma = 0` this is
//! the classical reachability value function; the stationary fixed point of
//! the undiscounted problem gives the infinite-horizon value used as a
//! comparison control barrier function.

use std::sync::Arc;

use thiserror::Error;

use crate::grid::{upwind_into, Grid, GridError, ScalarField};
use crate::model::ControlAffineModel;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("model has {model} states but grid has {grid} dimensions")]
    StateDimensionMismatch { model: usize, grid: usize },
    #[error("target field lives on a different grid than requested")]
    GridMismatch,
    #[error("invalid solve config: {0}")]
    BadConfig(String),
    #[error(
        "time step {dt} violates the CFL bound {bound} (cfl {cfl}, dissipation {alpha:?})"
    )]
    CflViolation {
        dt: f64,
        bound: f64,
        cfl: f64,
        alpha: Vec<f64>,
    },
    #[error("non-finite value produced at step {step}, node {node}")]
    NonFinite { step: usize, node: usize },
    #[error(
        "stationary solve did not converge within {steps} steps \
         (last residual {residual} per unit time, tolerance {tol})"
    )]
    NoConvergence { steps: usize, residual: f64, tol: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Errors from evaluating a [`ValueFunction`] at a state-time query.
#[derive(Debug, Error)]
pub enum ValueQueryError {
    #[error("time {t} outside the computed range [{horizon}, {latest}]")]
    TimeOutOfRange { t: f64, horizon: f64, latest: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Explicit time integrators for the backward march.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeScheme {
    Euler,
    TvdRk3,
}

impl TimeScheme {
    pub fn name(self) -> &'static str {
        match self {
            TimeScheme::Euler => "euler",
            TimeScheme::TvdRk3 => "tvd_rk3",
        }
    }
}

/// Parameters of one backward solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    /// Discount rate `gamma >= 0`; zero recovers the classical value function.
    pub gamma: f64,
    /// Initial (most negative) time of the solve; the final time is 0.
    pub horizon: f64,
    /// CFL number in (0, 1].
    pub cfl: f64,
    pub time_scheme: TimeScheme,
    /// Keep every k-th slice plus both endpoints; `None` picks a stride that
    /// retains at most 512 slices and caps slice storage near 256 MB.
    pub store_stride: Option<usize>,
    /// Stationary mode: stop when the sup-norm change per unit time drops
    /// below this.
    pub stationary_tol: f64,
    /// Stationary mode: iteration cap.
    pub max_steps: usize,
}

impl SolveConfig {
    pub fn new(gamma: f64, horizon: f64) -> Self {
        Self {
            gamma,
            horizon,
            cfl: 0.5,
            time_scheme: TimeScheme::TvdRk3,
            store_stride: None,
            stationary_tol: 1e-3,
            max_steps: 200_000,
        }
    }

    fn validate(&self) -> Result<(), SolveError> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(SolveError::BadConfig(format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if !self.horizon.is_finite() || self.horizon >= 0.0 {
            return Err(SolveError::BadConfig(format!(
                "horizon must be finite and < 0, got {}",
                self.horizon
            )));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(SolveError::BadConfig(format!(
                "cfl must lie in (0, 1], got {}",
                self.cfl
            )));
        }
        if self.store_stride == Some(0) {
            return Err(SolveError::BadConfig("store_stride must be >= 1".into()));
        }
        if !(self.stationary_tol > 0.0) {
            return Err(SolveError::BadConfig(format!(
                "stationary_tol must be > 0, got {}",
                self.stationary_tol
            )));
        }
        if self.max_steps == 0 {
            return Err(SolveError::BadConfig("max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Exact maximin Hamiltonian `max_u min_d costate . f(x, u, d)` for the
/// affine/box input structure: `costate . p(x)` plus, per channel, the
/// favorable box face for the control and the adversarial face for the
/// disturbance.
pub fn hamiltonian(model: &ControlAffineModel, x: &[f64], costate: &[f64]) -> f64 {
    let n_x = model.state_dim();
    debug_assert_eq!(costate.len(), n_x);
    let mut p = [0.0; crate::grid::MAX_DIMS];
    model.drift_into(x, &mut p[..n_x]);
    let mut q = vec![0.0; n_x * model.control_dim()];
    model.control_matrix_into(x, &mut q);
    let mut r = vec![0.0; n_x * model.disturbance_dim()];
    model.disturbance_matrix_into(x, &mut r);
    hamiltonian_parts(model, costate, &p[..n_x], &q, &r)
}

fn hamiltonian_parts(
    model: &ControlAffineModel,
    costate: &[f64],
    p: &[f64],
    q: &[f64],
    r: &[f64],
) -> f64 {
    let n_x = costate.len();
    let n_u = model.control_dim();
    let n_d = model.disturbance_dim();
    let mut h: f64 = costate.iter().zip(p).map(|(&a, &b)| a * b).sum();
    for j in 0..n_u {
        let c: f64 = (0..n_x).map(|i| costate[i] * q[i * n_u + j]).sum();
        h += if c >= 0.0 {
            c * model.u_box().max()[j]
        } else {
            c * model.u_box().min()[j]
        };
    }
    for j in 0..n_d {
        let c: f64 = (0..n_x).map(|i| costate[i] * r[i * n_d + j]).sum();
        h += if c >= 0.0 {
            c * model.d_box().min()[j]
        } else {
            c * model.d_box().max()[j]
        };
    }
    h
}

/// Lax-Friedrichs dissipation coefficients: per state dimension, the largest
/// `|f_i(x, u, d)|` over all grid nodes and input-box extremes. Computed once
/// per solve.
pub fn dissipation_bounds(model: &ControlAffineModel, grid: &Grid) -> Vec<f64> {
    let n_x = model.state_dim();
    let n_u = model.control_dim();
    let n_d = model.disturbance_dim();
    let mut alpha: Vec<f64> = vec![0.0; n_x];
    let mut coords = vec![0.0; grid.ndim()];
    let mut p = vec![0.0; n_x];
    let mut q = vec![0.0; n_x * n_u];
    let mut r = vec![0.0; n_x * n_d];
    for idx in 0..grid.node_count() {
        grid.node_coords_into(idx, &mut coords);
        model.drift_into(&coords, &mut p);
        model.control_matrix_into(&coords, &mut q);
        model.disturbance_matrix_into(&coords, &mut r);
        for i in 0..n_x {
            let mut lo = p[i];
            let mut hi = p[i];
            for j in 0..n_u {
                let a = q[i * n_u + j] * model.u_box().min()[j];
                let b = q[i * n_u + j] * model.u_box().max()[j];
                lo += a.min(b);
                hi += a.max(b);
            }
            for j in 0..n_d {
                let a = r[i * n_d + j] * model.d_box().min()[j];
                let b = r[i * n_d + j] * model.d_box().max()[j];
                lo += a.min(b);
                hi += a.max(b);
            }
            alpha[i] = alpha[i].max(lo.abs().max(hi.abs()));
        }
    }
    alpha
}

/// Monotone local Lax-Friedrichs Hamiltonian: the exact maximin evaluated at
/// the averaged one-sided derivatives plus dissipation proportional to their
/// gap. The dissipation sign is the monotone one for the forward-in-tau
/// march used here (it averages neighbors toward the cell, never away).
pub fn numerical_hamiltonian(
    model: &ControlAffineModel,
    x: &[f64],
    d_minus: &[f64],
    d_plus: &[f64],
    alpha: &[f64],
) -> f64 {
    let n_x = model.state_dim();
    let mut avg = [0.0; crate::grid::MAX_DIMS];
    for i in 0..n_x {
        avg[i] = 0.5 * (d_minus[i] + d_plus[i]);
    }
    let mut h = hamiltonian(model, x, &avg[..n_x]);
    for i in 0..n_x {
        h += 0.5 * alpha[i] * (d_plus[i] - d_minus[i]);
    }
    h
}

/// CFL-limited step size `cfl / sum_i(alpha_i / dx_i)`.
fn cfl_step(grid: &Grid, alpha: &[f64], cfl: f64) -> f64 {
    let sum: f64 = alpha
        .iter()
        .zip(grid.dx())
        .map(|(&a, &dx)| a / dx)
        .sum();
    if sum > 0.0 {
        cfl / sum
    } else {
        f64::INFINITY
    }
}

/// Lower cap for stored values: far below every target level, so the
/// zero-superlevel set is untouched while discounted doomed-region values
/// stay within a sane dynamic range.
fn value_floor(target: &[f64]) -> f64 {
    let max_abs = target.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    -10.0 * (1.0 + max_abs)
}

/// Reusable state for the backward march: dissipation coefficients, the
/// dynamics evaluated once per node, and scratch buffers. Node updates within
/// a step depend only on the previous slice.
struct Stepper {
    grid: Arc<Grid>,
    n_x: usize,
    n_u: usize,
    n_d: usize,
    alpha: Vec<f64>,
    node_p: Vec<f64>,
    node_q: Vec<f64>,
    node_r: Vec<f64>,
    u_lo: Vec<f64>,
    u_hi: Vec<f64>,
    d_lo: Vec<f64>,
    d_hi: Vec<f64>,
    d_minus: Vec<Vec<f64>>,
    d_plus: Vec<Vec<f64>>,
    stage_a: Vec<f64>,
    stage_b: Vec<f64>,
}

impl Stepper {
    fn new(model: &ControlAffineModel, grid: Arc<Grid>) -> Result<Self, SolveError> {
        let n_x = model.state_dim();
        if n_x != grid.ndim() {
            return Err(SolveError::StateDimensionMismatch {
                model: n_x,
                grid: grid.ndim(),
            });
        }
        let n_u = model.control_dim();
        let n_d = model.disturbance_dim();
        let nodes = grid.node_count();
        let mut node_p = vec![0.0; nodes * n_x];
        let mut node_q = vec![0.0; nodes * n_x * n_u];
        let mut node_r = vec![0.0; nodes * n_x * n_d];
        let mut coords = vec![0.0; n_x];
        for idx in 0..nodes {
            grid.node_coords_into(idx, &mut coords);
            model.drift_into(&coords, &mut node_p[idx * n_x..(idx + 1) * n_x]);
            if n_u > 0 {
                model.control_matrix_into(
                    &coords,
                    &mut node_q[idx * n_x * n_u..(idx + 1) * n_x * n_u],
                );
            }
            if n_d > 0 {
                model.disturbance_matrix_into(
                    &coords,
                    &mut node_r[idx * n_x * n_d..(idx + 1) * n_x * n_d],
                );
            }
        }
        let alpha = dissipation_bounds(model, &grid);
        Ok(Self {
            n_x,
            n_u,
            n_d,
            alpha,
            node_p,
            node_q,
            node_r,
            u_lo: model.u_box().min().to_vec(),
            u_hi: model.u_box().max().to_vec(),
            d_lo: model.d_box().min().to_vec(),
            d_hi: model.d_box().max().to_vec(),
            d_minus: (0..n_x).map(|_| vec![0.0; nodes]).collect(),
            d_plus: (0..n_x).map(|_| vec![0.0; nodes]).collect(),
            stage_a: vec![0.0; nodes],
            stage_b: vec![0.0; nodes],
            grid,
        })
    }

    /// One forward-Euler substep of length `dt`, clamped into
    /// `[clamp_scale * floor, clamp_scale * target]`; returns the first node
    /// that went non-finite, if any.
    ///
    /// The march runs in rescaled variables W(x,t) = exp(gamma t) B(x,t):
    /// W satisfies the undiscounted inequality against the shrinking target
    /// exp(gamma t) l(x), so no exponential source term appears. The lower
    /// clamp bounds doomed values at a fixed barrier level: the discounted
    /// value spans exp(gamma |t|) in magnitude by definition, and without
    /// the clamp one cell of smearing across the zero level outweighs every
    /// safe value near the deadline, inflating the doomed region without
    /// bound. Both clamps leave the zero-superlevel set's dynamics intact
    /// (they bind strictly away from zero); the discount-invariance of the
    /// computed safe sets is checked by the acceptance suite.
    fn euler_into(
        &mut self,
        src: &[f64],
        target: &[f64],
        clamp_scale: f64,
        floor: f64,
        dt: f64,
        dst: &mut [f64],
    ) -> Option<usize> {
        for dim in 0..self.n_x {
            upwind_into(
                &self.grid,
                src,
                dim,
                &mut self.d_minus[dim],
                &mut self.d_plus[dim],
            );
        }
        let n_x = self.n_x;
        let n_u = self.n_u;
        let n_d = self.n_d;
        let mut bad = None;
        for idx in 0..src.len() {
            let mut avg = [0.0; crate::grid::MAX_DIMS];
            let mut h = 0.0;
            let p = &self.node_p[idx * n_x..(idx + 1) * n_x];
            for i in 0..n_x {
                let dm = self.d_minus[i][idx];
                let dp = self.d_plus[i][idx];
                avg[i] = 0.5 * (dm + dp);
                h += avg[i] * p[i] + 0.5 * self.alpha[i] * (dp - dm);
            }
            if n_u > 0 {
                let q = &self.node_q[idx * n_x * n_u..(idx + 1) * n_x * n_u];
                for j in 0..n_u {
                    let mut c = 0.0;
                    for i in 0..n_x {
                        c += avg[i] * q[i * n_u + j];
                    }
                    h += if c >= 0.0 { c * self.u_hi[j] } else { c * self.u_lo[j] };
                }
            }
            if n_d > 0 {
                let r = &self.node_r[idx * n_x * n_d..(idx + 1) * n_x * n_d];
                for j in 0..n_d {
                    let mut c = 0.0;
                    for i in 0..n_x {
                        c += avg[i] * r[i * n_d + j];
                    }
                    h += if c >= 0.0 { c * self.d_lo[j] } else { c * self.d_hi[j] };
                }
            }
            let candidate = src[idx] + dt * h;
            let v = candidate
                .max(clamp_scale * floor)
                .min(clamp_scale * target[idx]);
            if !v.is_finite() && bad.is_none() {
                bad = Some(idx);
            }
            dst[idx] = v;
        }
        bad
    }

    /// Full step with the configured scheme; `dst` must not alias `src`.
    /// Every stage clamps against `clamp_scale * target` (the target level
    /// at the end of the step).
    fn step_into(
        &mut self,
        src: &[f64],
        target: &[f64],
        clamp_scale: f64,
        floor: f64,
        dt: f64,
        scheme: TimeScheme,
        dst: &mut [f64],
    ) -> Option<usize> {
        match scheme {
            TimeScheme::Euler => self.euler_into(src, target, clamp_scale, floor, dt, dst),
            TimeScheme::TvdRk3 => {
                let mut s1 = std::mem::take(&mut self.stage_a);
                let mut s2 = std::mem::take(&mut self.stage_b);
                let mut bad = self.euler_into(src, target, clamp_scale, floor, dt, &mut s1);
                bad = bad.or(self.euler_into(&s1, target, clamp_scale, floor, dt, &mut s2));
                for (v, (&a, &b)) in s2.iter_mut().zip(src.iter().zip(target)) {
                    *v = (0.75 * a + 0.25 * *v).min(clamp_scale * b);
                }
                bad = bad.or(self.euler_into(&s2, target, clamp_scale, floor, dt, &mut s1));
                for (i, v) in dst.iter_mut().enumerate() {
                    *v = (src[i] / 3.0 + 2.0 / 3.0 * s1[i]).min(clamp_scale * target[i]);
                    if !v.is_finite() && bad.is_none() {
                        bad = Some(i);
                    }
                }
                self.stage_a = s1;
                self.stage_b = s2;
                bad
            }
        }
    }
}

/// Advances one backward step of length `dt` from a slice, enforcing the VI
/// clamp against `target`. Rejects steps that violate the CFL bound.
pub fn step_backward(
    slice: &ScalarField,
    target: &ScalarField,
    dt: f64,
    cfg: &SolveConfig,
    model: &ControlAffineModel,
) -> Result<ScalarField, SolveError> {
    cfg.validate()?;
    if !slice.same_grid(target) {
        return Err(SolveError::GridMismatch);
    }
    if !(dt > 0.0) {
        return Err(SolveError::BadConfig(format!("dt must be > 0, got {dt}")));
    }
    let grid = slice.grid().clone();
    let mut stepper = Stepper::new(model, grid.clone())?;
    let bound = cfl_step(&grid, &stepper.alpha, cfg.cfl);
    if dt > bound * (1.0 + 1e-12) {
        return Err(SolveError::CflViolation {
            dt,
            bound,
            cfl: cfg.cfl,
            alpha: stepper.alpha.clone(),
        });
    }
    let mut out = vec![0.0; slice.values().len()];
    let floor = value_floor(target.values());
    // The step is phrased in barrier values; internally the march runs in
    // rescaled variables relative to the slice's own time, so one step of
    // length dt uses the relative factor exp(-gamma dt) for the end-of-step
    // clamp and rescales the result back.
    let shrink = (-cfg.gamma * dt).exp();
    let bad = stepper.step_into(
        slice.values(),
        target.values(),
        shrink,
        floor,
        dt,
        cfg.time_scheme,
        &mut out,
    );
    if let Some(node) = bad {
        return Err(SolveError::NonFinite { step: 0, node });
    }
    for (v, &l) in out.iter_mut().zip(target.values()) {
        *v = if *v == shrink * l {
            l
        } else {
            (*v / shrink).max(floor).min(l)
        };
    }
    Ok(ScalarField::from_values_unchecked(grid, out))
}

/// A value function as a time-indexed stack of slices, ordered from the
/// terminal time 0 down to the horizon. The slice at time 0 is the safety
/// target itself, and every slice is pointwise at most the target.
#[derive(Debug, Clone)]
pub struct ValueFunction {
    grid: Arc<Grid>,
    times: Vec<f64>,
    slices: Vec<ScalarField>,
    gamma: f64,
    model_name: String,
}

impl ValueFunction {
    /// Assembles a value function from parts, checking the time/slice
    /// structure. Times must strictly decrease from 0.
    pub fn from_parts(
        grid: Arc<Grid>,
        times: Vec<f64>,
        slices: Vec<ScalarField>,
        gamma: f64,
        model_name: String,
    ) -> Result<Self, SolveError> {
        if times.is_empty() || times.len() != slices.len() {
            return Err(SolveError::BadConfig(format!(
                "{} times for {} slices",
                times.len(),
                slices.len()
            )));
        }
        if times[0] != 0.0 {
            return Err(SolveError::BadConfig(format!(
                "first stored time must be 0, got {}",
                times[0]
            )));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(SolveError::BadConfig(
                "stored times must strictly decrease".into(),
            ));
        }
        for s in &slices {
            if !(Arc::ptr_eq(s.grid(), &grid) || s.grid().spec() == grid.spec()) {
                return Err(SolveError::GridMismatch);
            }
        }
        Ok(Self {
            grid,
            times,
            slices,
            gamma,
            model_name,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn slices(&self) -> &[ScalarField] {
        &self.slices
    }

    pub fn slice(&self, k: usize) -> &ScalarField {
        &self.slices[k]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    /// Most negative stored time.
    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Index pair bracketing `t` (times decrease) and the weight of the
    /// earlier-index (larger-time) slice.
    fn bracket(&self, t: f64) -> Result<(usize, usize, f64), ValueQueryError> {
        let latest = self.times[0];
        let horizon = self.horizon();
        if !(t <= latest && t >= horizon) {
            return Err(ValueQueryError::TimeOutOfRange { t, horizon, latest });
        }
        if self.times.len() == 1 {
            return Ok((0, 0, 1.0));
        }
        // First index whose time is <= t, searching the decreasing list.
        let mut lo = 0usize;
        let mut hi = self.times.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.times[mid] >= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let span = self.times[lo] - self.times[hi];
        let w = ((t - self.times[hi]) / span).clamp(0.0, 1.0);
        Ok((lo, hi, w))
    }

    /// Interpolated value `B(x, t)`: multilinear in space, linear between the
    /// two bracketing stored times.
    pub fn value_at(&self, x: &[f64], t: f64) -> Result<f64, ValueQueryError> {
        let (a, b, w) = self.bracket(t)?;
        let va = self.slices[a].interpolate(x)?;
        if a == b {
            return Ok(va);
        }
        let vb = self.slices[b].interpolate(x)?;
        Ok(w * va + (1.0 - w) * vb)
    }

    /// Interpolated spatial gradient of `B` at `(x, t)`.
    pub fn gradient_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<(), ValueQueryError> {
        let (a, b, w) = self.bracket(t)?;
        self.slices[a].gradient_into(x, out)?;
        if a == b {
            return Ok(());
        }
        let mut gb = [0.0; crate::grid::MAX_DIMS];
        let gb = &mut gb[..self.grid.ndim()];
        self.slices[b].gradient_into(x, gb)?;
        for (o, &g) in out.iter_mut().zip(gb.iter()) {
            *o = w * *o + (1.0 - w) * g;
        }
        Ok(())
    }

    pub fn gradient_at(&self, x: &[f64], t: f64) -> Result<Vec<f64>, ValueQueryError> {
        let mut out = vec![0.0; self.grid.ndim()];
        self.gradient_into(x, t, &mut out)?;
        Ok(out)
    }

    /// Finite-difference time slope of `B` at `(x, t)` across the bracketing
    /// stored slices; zero for a single-slice (stationary) function.
    pub fn time_slope_at(&self, x: &[f64], t: f64) -> Result<f64, ValueQueryError> {
        let (a, b, _) = self.bracket(t)?;
        if a == b {
            return Ok(0.0);
        }
        let va = self.slices[a].interpolate(x)?;
        let vb = self.slices[b].interpolate(x)?;
        Ok((va - vb) / (self.times[a] - self.times[b]))
    }
}

/// Picks the stored-slice stride: at most 512 slices, and at most about
/// 256 MB of slice payload.
fn auto_stride(node_count: usize, total_slices: usize) -> usize {
    const MAX_SLICES: usize = 512;
    const MAX_BYTES: usize = 256 << 20;
    let by_mem = (MAX_BYTES / (node_count * 8).max(1)).max(2);
    let cap = MAX_SLICES.min(by_mem);
    total_slices.div_ceil(cap).max(1)
}

/// Solves the discounted safety problem backward from `B(x, 0) = l(x)` to
/// the horizon, storing every `store_stride`-th slice plus both endpoints.
pub fn solve_cbvf(
    model: &ControlAffineModel,
    target: &ScalarField,
    cfg: &SolveConfig,
) -> Result<ValueFunction, SolveError> {
    cfg.validate()?;
    let grid = target.grid().clone();
    let mut stepper = Stepper::new(model, grid.clone())?;
    let span = -cfg.horizon;
    let mut dt = cfl_step(&grid, &stepper.alpha, cfg.cfl);
    if !dt.is_finite() {
        dt = span;
    }
    dt = dt.min(span);
    let n_steps = (span / dt).ceil() as usize;
    let n_steps = n_steps.max(1);
    let stride = cfg
        .store_stride
        .unwrap_or_else(|| auto_stride(grid.node_count(), n_steps + 1));

    let floor = value_floor(target.values());
    let mut times = vec![0.0];
    let mut slices = vec![target.clone()];
    // March in rescaled variables anchored at the terminal time: the stored
    // barrier slice at time t is exp(-gamma t) times the marched value, with
    // clamped nodes mapped back to the target bitwise and deep doomed values
    // floored.
    let mut current = target.values().to_vec();
    let mut next = vec![0.0; current.len()];
    for step in 1..=n_steps {
        let (t_next, dt_step) = if step == n_steps {
            let prev_t = -((step - 1) as f64) * dt;
            (cfg.horizon, cfg.horizon.abs() - prev_t.abs())
        } else {
            (-(step as f64) * dt, dt)
        };
        let dt_step = if dt_step > 0.0 { dt_step } else { dt };
        let scale = (cfg.gamma * t_next).exp();
        if let Some(node) = stepper.step_into(
            &current,
            target.values(),
            scale,
            floor,
            dt_step,
            cfg.time_scheme,
            &mut next,
        ) {
            return Err(SolveError::NonFinite { step, node });
        }
        std::mem::swap(&mut current, &mut next);
        if step % stride == 0 || step == n_steps {
            times.push(t_next);
            let barrier: Vec<f64> = current
                .iter()
                .zip(target.values())
                .map(|(&w, &l)| {
                    if w == scale * l {
                        l
                    } else {
                        (w / scale).max(floor).min(l)
                    }
                })
                .collect();
            slices.push(ScalarField::from_values_unchecked(grid.clone(), barrier));
        }
    }
    ValueFunction::from_parts(grid, times, slices, cfg.gamma, model.name().to_string())
}

/// Iterates the undiscounted backward march to its fixed point: the
/// infinite-horizon value function. Requires `cfg.gamma == 0`. Euler and
/// TVD-RK3 marches share their fixed points; Euler is three times cheaper
/// per step and usually the right choice here.
pub fn solve_stationary(
    model: &ControlAffineModel,
    target: &ScalarField,
    cfg: &SolveConfig,
) -> Result<ScalarField, SolveError> {
    if cfg.gamma != 0.0 {
        return Err(SolveError::BadConfig(format!(
            "stationary solve is defined for gamma = 0, got {}",
            cfg.gamma
        )));
    }
    if !(cfg.cfl > 0.0 && cfg.cfl <= 1.0) {
        return Err(SolveError::BadConfig(format!(
            "cfl must lie in (0, 1], got {}",
            cfg.cfl
        )));
    }
    if !(cfg.stationary_tol > 0.0) || cfg.max_steps == 0 {
        return Err(SolveError::BadConfig(
            "stationary solve needs stationary_tol > 0 and max_steps >= 1".into(),
        ));
    }
    let grid = target.grid().clone();
    let mut stepper = Stepper::new(model, grid.clone())?;
    let mut dt = cfl_step(&grid, &stepper.alpha, cfg.cfl);
    if !dt.is_finite() {
        dt = 1.0;
    }
    let mut current = target.values().to_vec();
    let mut next = vec![0.0; current.len()];
    let mut residual = f64::INFINITY;
    let floor = value_floor(target.values());
    for step in 1..=cfg.max_steps {
        if let Some(node) = stepper.step_into(
            &current,
            target.values(),
            1.0,
            floor,
            dt,
            cfg.time_scheme,
            &mut next,
        ) {
            return Err(SolveError::NonFinite { step, node });
        }
        residual = current
            .iter()
            .zip(&next)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
            / dt;
        std::mem::swap(&mut current, &mut next);
        if residual <= cfg.stationary_tol {
            return Ok(ScalarField::from_values_unchecked(grid, current));
        }
    }
    Err(SolveError::NoConvergence {
        steps: cfg.max_steps,
        residual,
        tol: cfg.stationary_tol,
    })
}
