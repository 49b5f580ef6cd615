//! Control-affine dynamics with box-bounded inputs.
//!
//! Models have the form `f(x, u, d) = p(x) + q(x) u + r(x) d` with the
//! control `u` and disturbance `d` each confined to an axis-aligned box.
//! For this structure the inner maximin over inputs is attained at box
//! vertices channel by channel, which the solver and the controllers exploit.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("box channel {channel}: min ({min}) exceeds max ({max})")]
    InvertedBounds { channel: usize, min: f64, max: f64 },
    #[error("{name} channel {channel}: value {value} outside [{min}, {max}]")]
    InputOutOfBounds {
        name: &'static str,
        channel: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("{name} has {got} channels, expected {expected}")]
    ChannelCountMismatch {
        name: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what} must be positive, got {value}")]
    NonPositiveParameter { what: &'static str, value: f64 },
    #[error("{what} must be non-negative, got {value}")]
    NegativeParameter { what: &'static str, value: f64 },
}

/// Axis-aligned box of admissible inputs, one `[min, max]` interval per
/// channel. Zero channels model input-free systems; zero-width intervals
/// pin a channel to a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl BoxBounds {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self, ModelError> {
        if min.len() != max.len() {
            return Err(ModelError::ChannelCountMismatch {
                name: "box max",
                expected: min.len(),
                got: max.len(),
            });
        }
        for (channel, (&lo, &hi)) in min.iter().zip(&max).enumerate() {
            if !(lo <= hi) {
                return Err(ModelError::InvertedBounds {
                    channel,
                    min: lo,
                    max: hi,
                });
            }
        }
        Ok(Self { min, max })
    }

    /// Symmetric interval `[-bound, bound]` per channel.
    pub fn symmetric(bounds: &[f64]) -> Result<Self, ModelError> {
        Self::new(bounds.iter().map(|b| -b).collect(), bounds.to_vec())
    }

    /// Box with no channels (input-free systems).
    pub fn empty() -> Self {
        Self { min: Vec::new(), max: Vec::new() }
    }

    pub fn channels(&self) -> usize {
        self.min.len()
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    pub fn midpoint(&self, channel: usize) -> f64 {
        0.5 * (self.min[channel] + self.max[channel])
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.channels()
            && v.iter()
                .zip(self.min.iter().zip(&self.max))
                .all(|(&x, (&lo, &hi))| x >= lo && x <= hi)
    }

    pub fn clamp(&self, v: &mut [f64]) {
        for (x, (&lo, &hi)) in v.iter_mut().zip(self.min.iter().zip(&self.max)) {
            *x = x.clamp(lo, hi);
        }
    }

    fn check(&self, name: &'static str, v: &[f64]) -> Result<(), ModelError> {
        if v.len() != self.channels() {
            return Err(ModelError::ChannelCountMismatch {
                name,
                expected: self.channels(),
                got: v.len(),
            });
        }
        for (channel, (&x, (&lo, &hi))) in v.iter().zip(self.min.iter().zip(&self.max)).enumerate()
        {
            if !(x >= lo && x <= hi) {
                return Err(ModelError::InputOutOfBounds {
                    name,
                    channel,
                    value: x,
                    min: lo,
                    max: hi,
                });
            }
        }
        Ok(())
    }
}

type StateMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Dynamics `f(x, u, d) = p(x) + q(x) u + r(x) d` with box input sets.
///
/// `q(x)` is `n_x` x `n_u` and `r(x)` is `n_x` x `n_d`, both row-major.
/// Models are immutable; evaluation is pure and freely concurrent.
#[derive(Clone)]
pub struct ControlAffineModel {
    name: String,
    n_x: usize,
    n_u: usize,
    n_d: usize,
    drift: StateMap,
    control_mat: StateMap,
    disturbance_mat: StateMap,
    u_box: BoxBounds,
    d_box: BoxBounds,
}

impl fmt::Debug for ControlAffineModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineModel")
            .field("name", &self.name)
            .field("n_x", &self.n_x)
            .field("n_u", &self.n_u)
            .field("n_d", &self.n_d)
            .field("u_box", &self.u_box)
            .field("d_box", &self.d_box)
            .finish()
    }
}

impl ControlAffineModel {
    pub fn new(
        name: impl Into<String>,
        n_x: usize,
        drift: StateMap,
        control_mat: StateMap,
        disturbance_mat: StateMap,
        u_box: BoxBounds,
        d_box: BoxBounds,
    ) -> Self {
        Self {
            name: name.into(),
            n_x,
            n_u: u_box.channels(),
            n_d: d_box.channels(),
            drift,
            control_mat,
            disturbance_mat,
            u_box,
            d_box,
        }
    }

    /// Planar double integrator: states (z, v), `dz = v + d`, `dv = u`,
    /// `u` in [-0.5, 0.5], `d` in [-0.2, 0.2].
    pub fn double_integrator() -> Self {
        Self::new(
            "double_integrator",
            2,
            Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = x[1];
                out[1] = 0.0;
            }),
            Arc::new(|_x: &[f64], out: &mut [f64]| {
                out[0] = 0.0;
                out[1] = 1.0;
            }),
            Arc::new(|_x: &[f64], out: &mut [f64]| {
                out[0] = 1.0;
                out[1] = 0.0;
            }),
            BoxBounds::symmetric(&[0.5]).unwrap(),
            BoxBounds::symmetric(&[0.2]).unwrap(),
        )
    }

    /// Dubins car at fixed forward speed: states (x, y, heading) with the
    /// heading periodic, turn rate `u` in [-3, 3], disturbance-free.
    pub fn dubins_car(speed: f64) -> Result<Self, ModelError> {
        if !(speed > 0.0) {
            return Err(ModelError::NonPositiveParameter {
                what: "dubins speed",
                value: speed,
            });
        }
        Ok(Self::new(
            "dubins_car",
            3,
            Arc::new(move |x: &[f64], out: &mut [f64]| {
                out[0] = speed * x[2].cos();
                out[1] = speed * x[2].sin();
                out[2] = 0.0;
            }),
            Arc::new(|_x: &[f64], out: &mut [f64]| {
                out[0] = 0.0;
                out[1] = 0.0;
                out[2] = 1.0;
            }),
            Arc::new(|_x: &[f64], _out: &mut [f64]| {}),
            BoxBounds::symmetric(&[3.0]).unwrap(),
            BoxBounds::empty(),
        ))
    }

    /// Scalar analytic test system `dx = u + d` with `|u| <= u_max`,
    /// `|d| <= d_max`.
    pub fn single_integrator_1d(u_max: f64, d_max: f64) -> Result<Self, ModelError> {
        if u_max < 0.0 {
            return Err(ModelError::NegativeParameter {
                what: "u_max",
                value: u_max,
            });
        }
        if d_max < 0.0 {
            return Err(ModelError::NegativeParameter {
                what: "d_max",
                value: d_max,
            });
        }
        Ok(Self::new(
            "single_integrator_1d",
            1,
            Arc::new(|_x: &[f64], out: &mut [f64]| {
                out[0] = 0.0;
            }),
            Arc::new(|_x: &[f64], out: &mut [f64]| {
                out[0] = 1.0;
            }),
            Arc::new(|_x: &[f64], out: &mut [f64]| {
                out[0] = 1.0;
            }),
            BoxBounds::symmetric(&[u_max]).unwrap(),
            BoxBounds::symmetric(&[d_max]).unwrap(),
        ))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.n_x
    }

    pub fn control_dim(&self) -> usize {
        self.n_u
    }

    pub fn disturbance_dim(&self) -> usize {
        self.n_d
    }

    pub fn u_box(&self) -> &BoxBounds {
        &self.u_box
    }

    pub fn d_box(&self) -> &BoxBounds {
        &self.d_box
    }

    /// Writes `p(x)` into `out` (`n_x` entries).
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_x);
        (self.drift)(x, out);
    }

    /// Writes row-major `q(x)` into `out` (`n_x * n_u` entries).
    pub fn control_matrix_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_x * self.n_u);
        (self.control_mat)(x, out);
    }

    /// Writes row-major `r(x)` into `out` (`n_x * n_d` entries).
    pub fn disturbance_matrix_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_x * self.n_d);
        (self.disturbance_mat)(x, out);
    }

    /// `f(x, u, d) = p(x) + q(x) u + r(x) d`, checking the input boxes.
    pub fn eval_dynamics(&self, x: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.u_box.check("control", u)?;
        self.d_box.check("disturbance", d)?;
        let mut out = vec![0.0; self.n_x];
        let mut scratch = [0.0; crate::grid::MAX_DIMS * crate::grid::MAX_DIMS];
        self.eval_dynamics_unchecked(x, u, d, &mut out, &mut scratch);
        Ok(out)
    }

    /// Same as [`eval_dynamics`](Self::eval_dynamics) but without box checks
    /// or allocation; `scratch` needs `n_x * max(n_u, n_d, 1)` entries.
    /// Used by the integrator and the brute-force oracles in tests.
    pub fn eval_dynamics_unchecked(
        &self,
        x: &[f64],
        u: &[f64],
        d: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        (self.drift)(x, out);
        if self.n_u > 0 {
            let q = &mut scratch[..self.n_x * self.n_u];
            (self.control_mat)(x, q);
            for i in 0..self.n_x {
                let row = &q[i * self.n_u..(i + 1) * self.n_u];
                out[i] += row.iter().zip(u).map(|(&a, &b)| a * b).sum::<f64>();
            }
        }
        if self.n_d > 0 {
            let r = &mut scratch[..self.n_x * self.n_d];
            (self.disturbance_mat)(x, r);
            for i in 0..self.n_x {
                let row = &r[i * self.n_d..(i + 1) * self.n_d];
                out[i] += row.iter().zip(d).map(|(&a, &b)| a * b).sum::<f64>();
            }
        }
    }

    /// The input pair attaining `max_u min_d costate . f(x, u, d)` for the
    /// affine/box structure: each control channel goes to the box face
    /// selected by the sign of `costate^T q(x)`, each disturbance channel to
    /// the opposite face of `costate^T r(x)`; ties take the box midpoint.
    pub fn bang_bang_inputs(&self, x: &[f64], costate: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(costate.len(), self.n_x);
        let mut u = vec![0.0; self.n_u];
        let mut d = vec![0.0; self.n_d];
        let mut mat = vec![0.0; self.n_x * self.n_u.max(self.n_d)];
        if self.n_u > 0 {
            let q = &mut mat[..self.n_x * self.n_u];
            (self.control_mat)(x, q);
            for (j, uj) in u.iter_mut().enumerate() {
                let c: f64 = (0..self.n_x).map(|i| costate[i] * q[i * self.n_u + j]).sum();
                *uj = if c > 0.0 {
                    self.u_box.max[j]
                } else if c < 0.0 {
                    self.u_box.min[j]
                } else {
                    self.u_box.midpoint(j)
                };
            }
        }
        if self.n_d > 0 {
            let r = &mut mat[..self.n_x * self.n_d];
            (self.disturbance_mat)(x, r);
            for (j, dj) in d.iter_mut().enumerate() {
                let c: f64 = (0..self.n_x).map(|i| costate[i] * r[i * self.n_d + j]).sum();
                *dj = if c > 0.0 {
                    self.d_box.min[j]
                } else if c < 0.0 {
                    self.d_box.max[j]
                } else {
                    self.d_box.midpoint(j)
                };
            }
        }
        (u, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn double_integrator_dynamics() {
        let m = ControlAffineModel::double_integrator();
        assert_eq!(m.u_box().min(), &[-0.5]);
        assert_eq!(m.u_box().max(), &[0.5]);
        assert_eq!(m.d_box().min(), &[-0.2]);
        assert_eq!(m.d_box().max(), &[0.2]);
        let f = m.eval_dynamics(&[3.0, -1.0], &[0.5], &[0.0]).unwrap();
        assert_eq!(f, vec![-1.0, 0.5]);
        let f = m.eval_dynamics(&[0.0, 2.0], &[0.0], &[0.2]).unwrap();
        assert_eq!(f, vec![2.2, 0.0]);
    }

    #[test]
    fn control_outside_box_rejected() {
        let m = ControlAffineModel::double_integrator();
        let err = m.eval_dynamics(&[0.0, 0.0], &[0.6], &[0.0]).unwrap_err();
        assert!(matches!(
            err,
            ModelError::InputOutOfBounds { name: "control", channel: 0, .. }
        ));
    }

    #[test]
    fn dubins_dynamics() {
        let m = ControlAffineModel::dubins_car(1.0).unwrap();
        assert_eq!(m.u_box().min(), &[-3.0]);
        assert_eq!(m.u_box().max(), &[3.0]);
        assert_eq!(m.disturbance_dim(), 0);
        let f = m.eval_dynamics(&[0.0, 0.0, 0.0], &[3.0], &[]).unwrap();
        assert_eq!(f, vec![1.0, 0.0, 3.0]);
        let f = m
            .eval_dynamics(&[0.0, 0.0, std::f64::consts::FRAC_PI_2], &[0.0], &[])
            .unwrap();
        assert!(f[0].abs() < 1e-15);
        assert!((f[1] - 1.0).abs() < 1e-15);
        assert_eq!(f[2], 0.0);
    }

    #[test]
    fn dubins_rejects_zero_speed() {
        assert!(ControlAffineModel::dubins_car(0.0).is_err());
        assert!(ControlAffineModel::dubins_car(-1.0).is_err());
    }

    #[test]
    fn single_integrator_dynamics() {
        let m = ControlAffineModel::single_integrator_1d(1.0, 0.5).unwrap();
        let f = m.eval_dynamics(&[0.3], &[1.0], &[-0.5]).unwrap();
        assert!((f[0] - 0.5).abs() < 1e-15);
        assert!(ControlAffineModel::single_integrator_1d(-0.1, 0.0).is_err());
    }

    #[test]
    fn bang_bang_sign_rules() {
        let m = ControlAffineModel::double_integrator();
        // costate (1, -2): c_u = -2 -> u at min; c_d = 1 -> d at min.
        let (u, d) = m.bang_bang_inputs(&[0.0, 0.0], &[1.0, -2.0]);
        assert_eq!(u, vec![-0.5]);
        assert_eq!(d, vec![-0.2]);
        // Zero costate: both midpoints.
        let (u, d) = m.bang_bang_inputs(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(u, vec![0.0]);
        assert_eq!(d, vec![0.0]);
        let dub = ControlAffineModel::dubins_car(1.0).unwrap();
        let (u, _) = dub.bang_bang_inputs(&[0.0, 0.0, 0.0], &[0.0, 0.0, 1.0]);
        assert_eq!(u, vec![3.0]);
    }

    /// Brute-force maximin over input grids; refining the grids must close in
    /// on the closed-form bang-bang value.
    fn grid_maximin(m: &ControlAffineModel, x: &[f64], costate: &[f64], points: usize) -> f64 {
        let mut f = vec![0.0; m.state_dim()];
        let mut scratch = vec![0.0; m.state_dim() * m.control_dim().max(m.disturbance_dim()).max(1)];
        let lerp = |lo: f64, hi: f64, i: usize| {
            lo + (hi - lo) * i as f64 / (points - 1) as f64
        };
        let mut best_u = f64::NEG_INFINITY;
        let n_u_pts = if m.control_dim() == 0 { 1 } else { points };
        let n_d_pts = if m.disturbance_dim() == 0 { 1 } else { points };
        let mut u = vec![0.0; m.control_dim()];
        let mut d = vec![0.0; m.disturbance_dim()];
        for iu in 0..n_u_pts {
            if m.control_dim() == 1 {
                u[0] = lerp(m.u_box().min()[0], m.u_box().max()[0], iu);
            }
            let mut worst_d = f64::INFINITY;
            for id in 0..n_d_pts {
                if m.disturbance_dim() == 1 {
                    d[0] = lerp(m.d_box().min()[0], m.d_box().max()[0], id);
                }
                m.eval_dynamics_unchecked(x, &u, &d, &mut f, &mut scratch);
                let v: f64 = costate.iter().zip(&f).map(|(&a, &b)| a * b).sum();
                worst_d = worst_d.min(v);
            }
            best_u = best_u.max(worst_d);
        }
        best_u
    }

    #[test]
    fn bang_bang_matches_grid_maximin_and_refines() {
        let models = [
            ControlAffineModel::double_integrator(),
            ControlAffineModel::dubins_car(1.0).unwrap(),
            ControlAffineModel::single_integrator_1d(1.0, 0.5).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in &models {
            let mut worst_gap_coarse = 0.0f64;
            let mut worst_gap_fine = 0.0f64;
            let mut f = vec![0.0; m.state_dim()];
            let mut scratch =
                vec![0.0; m.state_dim() * m.control_dim().max(m.disturbance_dim()).max(1)];
            // The full thousand-draw sweep with 1001-point grids lives in the
            // acceptance suite; keep the module test quick.
            for _ in 0..100 {
                let x: Vec<f64> = (0..m.state_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let costate: Vec<f64> =
                    (0..m.state_dim()).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let (u, d) = m.bang_bang_inputs(&x, &costate);
                m.eval_dynamics_unchecked(&x, &u, &d, &mut f, &mut scratch);
                let closed: f64 = costate.iter().zip(&f).map(|(&a, &b)| a * b).sum();
                let coarse = grid_maximin(m, &x, &costate, 101);
                let fine = grid_maximin(m, &x, &costate, 1001);
                let scale = 1e-9f64.max(closed.abs() * 1e-9);
                // Closed form can only beat the grid (it attains the true max).
                assert!(closed >= coarse - scale, "{}: closed {closed} < coarse {coarse}", m.name());
                assert!(closed >= fine - scale, "{}: closed {closed} < fine {fine}", m.name());
                worst_gap_coarse = worst_gap_coarse.max(closed - coarse);
                worst_gap_fine = worst_gap_fine.max(closed - fine);
            }
            // Discretization gap shrinks by at least 5x from 101 to 1001 points.
            if worst_gap_coarse > 1e-12 {
                assert!(
                    worst_gap_fine <= worst_gap_coarse / 5.0,
                    "{}: coarse gap {worst_gap_coarse}, fine gap {worst_gap_fine}",
                    m.name()
                );
            }
        }
    }

    #[test]
    fn dynamics_affine_in_inputs() {
        let m = ControlAffineModel::double_integrator();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let u1 = [rng.gen_range(-0.5..0.5)];
            let u2 = [rng.gen_range(-0.5..0.5)];
            let d = [rng.gen_range(-0.2..0.2)];
            let a: f64 = rng.gen_range(0.0..1.0);
            let mix = [a * u1[0] + (1.0 - a) * u2[0]];
            let f1 = m.eval_dynamics(&x, &u1, &d).unwrap();
            let f2 = m.eval_dynamics(&x, &u2, &d).unwrap();
            let fm = m.eval_dynamics(&x, &mix, &d).unwrap();
            for i in 0..2 {
                let want = a * f1[i] + (1.0 - a) * f2[i];
                assert!((fm[i] - want).abs() < 1e-12);
            }
        }
    }
}
