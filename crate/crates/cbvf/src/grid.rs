//! Cartesian state-space grids and scalar fields on them.
//!
//! A [`Grid`] is a rectilinear discretization of a box in state space with up
//! to four dimensions, any of which may be periodic. A [`ScalarField`] stores
//! one value per node, row-major with the last dimension fastest. Fields
//! support multilinear interpolation, interpolated central-difference
//! gradients, and the one-sided (upwind) differences the solver consumes.
//!
//! Non-periodic boundaries use one layer of linearly extrapolated ghost
//! nodes (`ghost = 2*v_edge - v_inner`), which makes one-sided differences at
//! the boundary equal the adjacent interior difference and keeps linear
//! fields exact.

use std::sync::Arc;

use thiserror::Error;

/// Maximum number of grid dimensions supported.
pub const MAX_DIMS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid dimension {dim}: lo ({lo}) must be strictly below hi ({hi})")]
    EmptyExtent { dim: usize, lo: f64, hi: f64 },
    #[error("grid dimension {dim}: need at least 3 nodes, got {n}")]
    TooFewNodes { dim: usize, n: usize },
    #[error("grid must have 1 to {MAX_DIMS} dimensions, got {0}")]
    BadDimensionCount(usize),
    #[error("grid spec field lengths disagree (lo {lo}, hi {hi}, n {n}, periodic {periodic})")]
    MismatchedLengths {
        lo: usize,
        hi: usize,
        n: usize,
        periodic: usize,
    },
    #[error("non-finite bound on dimension {dim}")]
    NonFiniteBound { dim: usize },
    #[error("axis {dim} out of range for a {ndim}-d grid")]
    AxisOutOfRange { dim: usize, ndim: usize },
    #[error("query {value} outside [{lo}, {hi}] on non-periodic dimension {dim}")]
    OutOfDomain {
        dim: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("query has {got} coordinates, grid has {expected} dimensions")]
    QueryDimensionMismatch { expected: usize, got: usize },
    #[error("field has {got} values, grid has {expected} nodes")]
    ValueCountMismatch { expected: usize, got: usize },
    #[error("non-finite field value at node {node}")]
    NonFiniteValue { node: usize },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("operation needs a {expected}-d field, got {got}-d")]
    WrongDimensionality { expected: usize, got: usize },
}

/// Declarative description of a grid: bounds, node counts, periodicity.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
    pub periodic: Vec<bool>,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, n: Vec<usize>, periodic: Vec<bool>) -> Self {
        Self { lo, hi, n, periodic }
    }

    /// All dimensions non-periodic.
    pub fn rectangular(lo: Vec<f64>, hi: Vec<f64>, n: Vec<usize>) -> Self {
        let periodic = vec![false; lo.len()];
        Self { lo, hi, n, periodic }
    }

    fn validate(&self) -> Result<(), GridError> {
        let ndim = self.lo.len();
        if self.hi.len() != ndim || self.n.len() != ndim || self.periodic.len() != ndim {
            return Err(GridError::MismatchedLengths {
                lo: self.lo.len(),
                hi: self.hi.len(),
                n: self.n.len(),
                periodic: self.periodic.len(),
            });
        }
        if ndim == 0 || ndim > MAX_DIMS {
            return Err(GridError::BadDimensionCount(ndim));
        }
        for dim in 0..ndim {
            if !self.lo[dim].is_finite() || !self.hi[dim].is_finite() {
                return Err(GridError::NonFiniteBound { dim });
            }
            if self.lo[dim] >= self.hi[dim] {
                return Err(GridError::EmptyExtent {
                    dim,
                    lo: self.lo[dim],
                    hi: self.hi[dim],
                });
            }
            if self.n[dim] < 3 {
                return Err(GridError::TooFewNodes { dim, n: self.n[dim] });
            }
        }
        Ok(())
    }
}

/// A validated grid with node spacings and row-major strides.
///
/// Node `k` along dimension `i` sits at `lo[i] + k * dx[i]`. For periodic
/// dimensions the spacing divides the full period by `n` (the node at `hi`
/// is identified with the node at `lo` and not stored).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    spec: GridSpec,
    dx: Vec<f64>,
    strides: Vec<usize>,
    node_count: usize,
}

impl Grid {
    pub fn new(spec: GridSpec) -> Result<Self, GridError> {
        spec.validate()?;
        let ndim = spec.lo.len();
        let mut dx = Vec::with_capacity(ndim);
        for dim in 0..ndim {
            let extent = spec.hi[dim] - spec.lo[dim];
            let divisor = if spec.periodic[dim] {
                spec.n[dim] as f64
            } else {
                (spec.n[dim] - 1) as f64
            };
            dx.push(extent / divisor);
        }
        // Row-major, last dimension fastest.
        let mut strides = vec![0usize; ndim];
        let mut acc = 1usize;
        for dim in (0..ndim).rev() {
            strides[dim] = acc;
            acc = acc
                .checked_mul(spec.n[dim])
                .expect("grid node count overflows usize");
        }
        Ok(Self {
            spec,
            dx,
            strides,
            node_count: acc,
        })
    }

    pub fn into_shared(self) -> Arc<Grid> {
        Arc::new(self)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn ndim(&self) -> usize {
        self.spec.lo.len()
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn lo(&self) -> &[f64] {
        &self.spec.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.spec.hi
    }

    pub fn shape(&self) -> &[usize] {
        &self.spec.n
    }

    pub fn periodic(&self) -> &[bool] {
        &self.spec.periodic
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Coordinate of node `k` along `dim`, computed exactly as `lo + k*dx`.
    pub fn coord(&self, dim: usize, k: usize) -> f64 {
        self.spec.lo[dim] + k as f64 * self.dx[dim]
    }

    /// Full-state period of a periodic dimension (`hi - lo`).
    pub fn period(&self, dim: usize) -> f64 {
        self.spec.hi[dim] - self.spec.lo[dim]
    }

    /// Writes the coordinates of the node with flat index `idx`.
    pub fn node_coords_into(&self, idx: usize, out: &mut [f64]) {
        let mut rem = idx;
        for dim in 0..self.ndim() {
            let k = rem / self.strides[dim];
            rem %= self.strides[dim];
            out[dim] = self.coord(dim, k);
        }
    }

    pub fn node_coords(&self, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.ndim()];
        self.node_coords_into(idx, &mut out);
        out
    }

    /// Flat index of the node with per-dimension indices `k`.
    pub fn flat_index(&self, k: &[usize]) -> usize {
        k.iter()
            .zip(&self.strides)
            .map(|(&ki, &s)| ki * s)
            .sum()
    }

    /// Per-dimension index along `dim` of the node with flat index `idx`.
    pub fn axis_index(&self, idx: usize, dim: usize) -> usize {
        (idx / self.strides[dim]) % self.spec.n[dim]
    }

    /// True when `x` lies inside the grid box (periodic dimensions always do).
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.ndim()
            && (0..self.ndim()).all(|d| {
                self.spec.periodic[d]
                    || (x[d] >= self.spec.lo[d] && x[d] <= self.spec.hi[d] && x[d].is_finite())
            })
    }

    /// Wraps coordinate `x` of a periodic dimension into `[lo, lo + period)`.
    pub fn wrap(&self, dim: usize, x: f64) -> f64 {
        let lo = self.spec.lo[dim];
        let period = self.period(dim);
        let offset = x - lo;
        if (0.0..period).contains(&offset) {
            return x;
        }
        let wrapped = lo + offset.rem_euclid(period);
        // rem_euclid can land exactly on the period under rounding.
        if wrapped >= self.spec.hi[dim] {
            lo
        } else {
            wrapped
        }
    }

    /// Locates `x` for interpolation: for each dimension, the flat-index
    /// contributions of the two bracketing nodes and the fractional position
    /// between them. Queries exactly at a node are detected bitwise so
    /// interpolation reproduces stored values exactly.
    fn locate(&self, x: &[f64], loc: &mut AxisLocation) -> Result<(), GridError> {
        if x.len() != self.ndim() {
            return Err(GridError::QueryDimensionMismatch {
                expected: self.ndim(),
                got: x.len(),
            });
        }
        for dim in 0..self.ndim() {
            let (lo, hi) = (self.spec.lo[dim], self.spec.hi[dim]);
            let n = self.spec.n[dim];
            let periodic = self.spec.periodic[dim];
            let xd = if periodic {
                if !x[dim].is_finite() {
                    return Err(GridError::OutOfDomain {
                        dim,
                        value: x[dim],
                        lo,
                        hi,
                    });
                }
                self.wrap(dim, x[dim])
            } else {
                if !(x[dim] >= lo && x[dim] <= hi) {
                    return Err(GridError::OutOfDomain {
                        dim,
                        value: x[dim],
                        lo,
                        hi,
                    });
                }
                x[dim]
            };
            let dxd = self.dx[dim];
            // Exact node hit.
            let nearest = ((xd - lo) / dxd).round();
            if nearest >= 0.0 && (nearest as usize) < n && xd == lo + nearest * dxd {
                let k = nearest as usize;
                loc.base[dim] = k;
                loc.next[dim] = k;
                loc.frac[dim] = 0.0;
                continue;
            }
            let max_cell = if periodic { n - 1 } else { n - 2 };
            let mut cell = (((xd - lo) / dxd).floor() as isize).clamp(0, max_cell as isize) as usize;
            // Guard against floor landing one cell off near node boundaries.
            while cell > 0 && xd < self.coord(dim, cell) {
                cell -= 1;
            }
            while cell < max_cell && xd >= self.coord(dim, cell + 1) {
                cell += 1;
            }
            let frac = ((xd - self.coord(dim, cell)) / dxd).clamp(0.0, 1.0);
            loc.base[dim] = cell;
            loc.next[dim] = if periodic { (cell + 1) % n } else { cell + 1 };
            loc.frac[dim] = frac;
        }
        Ok(())
    }
}

/// Per-axis interpolation bracket; fixed arrays keep hot paths allocation-free.
#[derive(Debug, Default, Clone)]
struct AxisLocation {
    base: [usize; MAX_DIMS],
    next: [usize; MAX_DIMS],
    frac: [f64; MAX_DIMS],
}

/// One scalar value per grid node, row-major with the last dimension fastest.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    /// Wraps a value vector, checking length and finiteness.
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.node_count() {
            return Err(GridError::ValueCountMismatch {
                expected: grid.node_count(),
                got: values.len(),
            });
        }
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFiniteValue { node });
        }
        Ok(Self { grid, values })
    }

    /// Builds a field by evaluating `f` at every node.
    pub fn from_fn(
        grid: Arc<Grid>,
        mut f: impl FnMut(&[f64]) -> f64,
    ) -> Result<Self, GridError> {
        let mut coords = vec![0.0; grid.ndim()];
        let mut values = Vec::with_capacity(grid.node_count());
        for idx in 0..grid.node_count() {
            grid.node_coords_into(idx, &mut coords);
            values.push(f(&coords));
        }
        Self::new(grid, values)
    }

    /// Constant field.
    pub fn constant(grid: Arc<Grid>, value: f64) -> Result<Self, GridError> {
        let n = grid.node_count();
        Self::new(grid, vec![value; n])
    }

    pub(crate) fn from_values_unchecked(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// True when both fields share the same grid instance or equal specs.
    pub fn same_grid(&self, other: &ScalarField) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || self.grid.spec() == other.grid.spec()
    }

    /// Multilinear interpolation over the 2^ndim nodes enclosing `x`.
    ///
    /// Exact at nodes and for multilinear functions. Out-of-box queries on
    /// non-periodic dimensions are an error, never clamped.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64, GridError> {
        let mut loc = AxisLocation::default();
        self.grid.locate(x, &mut loc)?;
        let ndim = self.grid.ndim();
        let strides = self.grid.strides();
        let mut acc = 0.0;
        for corner in 0..(1usize << ndim) {
            let mut weight = 1.0;
            let mut idx = 0usize;
            for dim in 0..ndim {
                if corner >> dim & 1 == 1 {
                    weight *= loc.frac[dim];
                    idx += loc.next[dim] * strides[dim];
                } else {
                    weight *= 1.0 - loc.frac[dim];
                    idx += loc.base[dim] * strides[dim];
                }
            }
            if weight != 0.0 {
                acc += weight * self.values[idx];
            }
        }
        Ok(acc)
    }

    /// Difference approximation of the partial derivative along `dim` at the
    /// node with per-axis indices in `k_of`: central in the interior and on
    /// periodic wraps, one-sided at non-periodic boundaries.
    fn node_derivative(&self, flat: usize, dim: usize) -> f64 {
        let grid = &self.grid;
        let n = grid.shape()[dim];
        let stride = grid.strides()[dim];
        let k = grid.axis_index(flat, dim);
        let dx = grid.dx()[dim];
        if grid.periodic()[dim] {
            let prev = if k == 0 { flat + (n - 1) * stride } else { flat - stride };
            let next = if k == n - 1 { flat - (n - 1) * stride } else { flat + stride };
            (self.values[next] - self.values[prev]) / (2.0 * dx)
        } else if k == 0 {
            (self.values[flat + stride] - self.values[flat]) / dx
        } else if k == n - 1 {
            (self.values[flat] - self.values[flat - stride]) / dx
        } else {
            (self.values[flat + stride] - self.values[flat - stride]) / (2.0 * dx)
        }
    }

    /// Interpolated gradient at `x`: per-node difference quotients (central in
    /// the interior, one-sided at non-periodic boundaries) blended with the
    /// same multilinear weights as [`interpolate`](Self::interpolate).
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), GridError> {
        let ndim = self.grid.ndim();
        if out.len() != ndim {
            return Err(GridError::QueryDimensionMismatch {
                expected: ndim,
                got: out.len(),
            });
        }
        let mut loc = AxisLocation::default();
        self.grid.locate(x, &mut loc)?;
        let strides = self.grid.strides();
        out.fill(0.0);
        for corner in 0..(1usize << ndim) {
            let mut weight = 1.0;
            let mut idx = 0usize;
            for dim in 0..ndim {
                if corner >> dim & 1 == 1 {
                    weight *= loc.frac[dim];
                    idx += loc.next[dim] * strides[dim];
                } else {
                    weight *= 1.0 - loc.frac[dim];
                    idx += loc.base[dim] * strides[dim];
                }
            }
            if weight == 0.0 {
                continue;
            }
            for (dim, o) in out.iter_mut().enumerate() {
                *o += weight * self.node_derivative(idx, dim);
            }
        }
        Ok(())
    }

    pub fn gradient_at(&self, x: &[f64]) -> Result<Vec<f64>, GridError> {
        let mut out = vec![0.0; self.grid.ndim()];
        self.gradient_into(x, &mut out)?;
        Ok(out)
    }

    /// First-order one-sided differences along `dim`:
    /// `Dminus_k = (v_k - v_{k-1})/dx`, `Dplus_k = (v_{k+1} - v_k)/dx`.
    ///
    /// Periodic dimensions wrap; non-periodic boundaries use one layer of
    /// linearly extrapolated ghost nodes, so the boundary one-sided
    /// difference equals the adjacent interior difference.
    pub fn upwind_derivatives(&self, dim: usize) -> Result<(ScalarField, ScalarField), GridError> {
        let ndim = self.grid.ndim();
        if dim >= ndim {
            return Err(GridError::AxisOutOfRange { dim, ndim });
        }
        let mut minus = vec![0.0; self.values.len()];
        let mut plus = vec![0.0; self.values.len()];
        upwind_into(self.grid.as_ref(), &self.values, dim, &mut minus, &mut plus);
        Ok((
            ScalarField::from_values_unchecked(self.grid.clone(), minus),
            ScalarField::from_values_unchecked(self.grid.clone(), plus),
        ))
    }

    /// Extracts a (ndim-1)-dimensional slice at `value` along `dim`,
    /// interpolating linearly between the bracketing planes.
    pub fn slice_at(&self, dim: usize, value: f64) -> Result<ScalarField, GridError> {
        let ndim = self.grid.ndim();
        if dim >= ndim {
            return Err(GridError::AxisOutOfRange { dim, ndim });
        }
        if ndim < 2 {
            return Err(GridError::WrongDimensionality { expected: 2, got: ndim });
        }
        let spec = self.grid.spec();
        let keep: Vec<usize> = (0..ndim).filter(|&d| d != dim).collect();
        let sub_spec = GridSpec::new(
            keep.iter().map(|&d| spec.lo[d]).collect(),
            keep.iter().map(|&d| spec.hi[d]).collect(),
            keep.iter().map(|&d| spec.n[d]).collect(),
            keep.iter().map(|&d| spec.periodic[d]).collect(),
        );
        let sub_grid = Grid::new(sub_spec)?.into_shared();
        let mut query = vec![0.0; ndim];
        let mut sub_coords = vec![0.0; ndim - 1];
        let mut values = Vec::with_capacity(sub_grid.node_count());
        for idx in 0..sub_grid.node_count() {
            sub_grid.node_coords_into(idx, &mut sub_coords);
            for (slot, &d) in keep.iter().enumerate() {
                query[d] = sub_coords[slot];
            }
            query[dim] = value;
            values.push(self.interpolate(&query)?);
        }
        ScalarField::new(sub_grid, values)
    }
}

/// Fills `minus`/`plus` with the one-sided differences of `values` along
/// `dim`. Shared by [`ScalarField::upwind_derivatives`] and the solver's
/// reusable step buffers.
pub(crate) fn upwind_into(
    grid: &Grid,
    values: &[f64],
    dim: usize,
    minus: &mut [f64],
    plus: &mut [f64],
) {
    let n = grid.shape()[dim];
    let stride = grid.strides()[dim];
    let dx = grid.dx()[dim];
    let periodic = grid.periodic()[dim];
    let inv_dx = 1.0 / dx;
    // The nodes along `dim` form lines of `n` entries spaced `stride` apart;
    // iterate lines without per-node index arithmetic.
    let block = stride * n;
    let outer = values.len() / block;
    for o in 0..outer {
        for i in 0..stride {
            let start = o * block + i;
            // Interior nodes.
            for k in 1..n {
                let idx = start + k * stride;
                minus[idx] = (values[idx] - values[idx - stride]) * inv_dx;
            }
            for k in 0..n - 1 {
                let idx = start + k * stride;
                plus[idx] = (values[idx + stride] - values[idx]) * inv_dx;
            }
            let first = start;
            let last = start + (n - 1) * stride;
            if periodic {
                minus[first] = (values[first] - values[last]) * inv_dx;
                plus[last] = (values[first] - values[last]) * inv_dx;
            } else {
                // Linear-extrapolation ghosts collapse to the neighboring
                // interior difference.
                minus[first] = plus[first];
                plus[last] = minus[last];
            }
        }
    }
}
