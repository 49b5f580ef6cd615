//! Safety target functions built from named shapes.
//!
//! The safe set is the zero-superlevel set of the target function. A `box`
//! shape is safe inside an axis-aligned box (margin to the nearest face), a
//! `circle_complement` is safe outside a disk (distance to the disk), and
//! `min_of` intersects safe regions pointwise.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::grid::{Grid, GridError, ScalarField};

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("shape '{shape}': {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        shape: &'static str,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("shape dimension index {dim} out of range for a {ndim}-d grid")]
    DimOutOfRange { dim: usize, ndim: usize },
    #[error("circle_complement radius must be > 0, got {0}")]
    BadRadius(f64),
    #[error("min_of needs at least one sub-shape")]
    EmptyMinOf,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Declarative safety target. `dims` selects which state coordinates the
/// shape reads; an empty list means the leading coordinates in order.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetShape {
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
        dims: Vec<usize>,
    },
    CircleComplement {
        center: Vec<f64>,
        radius: f64,
        dims: Vec<usize>,
    },
    MinOf(Vec<TargetShape>),
}

impl TargetShape {
    /// Axis box over the leading dimensions.
    pub fn bounding_box(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        TargetShape::Box {
            lo,
            hi,
            dims: Vec::new(),
        }
    }

    /// Disk obstacle in the leading plane.
    pub fn disk_obstacle(center: Vec<f64>, radius: f64) -> Self {
        TargetShape::CircleComplement {
            center,
            radius,
            dims: Vec::new(),
        }
    }

    fn validate(&self, ndim: usize) -> Result<(), ShapeError> {
        match self {
            TargetShape::Box { lo, hi, dims } => {
                if lo.len() != hi.len() {
                    return Err(ShapeError::LengthMismatch {
                        shape: "box",
                        what: "hi",
                        expected: lo.len(),
                        got: hi.len(),
                    });
                }
                let dims = effective_dims(dims, lo.len());
                if dims.len() != lo.len() {
                    return Err(ShapeError::LengthMismatch {
                        shape: "box",
                        what: "dims",
                        expected: lo.len(),
                        got: dims.len(),
                    });
                }
                for &d in &dims {
                    if d >= ndim {
                        return Err(ShapeError::DimOutOfRange { dim: d, ndim });
                    }
                }
                Ok(())
            }
            TargetShape::CircleComplement {
                center,
                radius,
                dims,
            } => {
                if !(radius > &0.0) {
                    return Err(ShapeError::BadRadius(**&radius));
                }
                let dims = effective_dims(dims, center.len());
                if dims.len() != center.len() {
                    return Err(ShapeError::LengthMismatch {
                        shape: "circle_complement",
                        what: "dims",
                        expected: center.len(),
                        got: dims.len(),
                    });
                }
                for &d in &dims {
                    if d >= ndim {
                        return Err(ShapeError::DimOutOfRange { dim: d, ndim });
                    }
                }
                Ok(())
            }
            TargetShape::MinOf(shapes) => {
                if shapes.is_empty() {
                    return Err(ShapeError::EmptyMinOf);
                }
                for s in shapes {
                    s.validate(ndim)?;
                }
                Ok(())
            }
        }
    }

    /// Target value at a state.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TargetShape::Box { lo, hi, dims } => {
                let dims = effective_dims(dims, lo.len());
                let mut m = f64::INFINITY;
                for (slot, &d) in dims.iter().enumerate() {
                    m = m.min(x[d] - lo[slot]).min(hi[slot] - x[d]);
                }
                m
            }
            TargetShape::CircleComplement {
                center,
                radius,
                dims,
            } => {
                let dims = effective_dims(dims, center.len());
                let mut sq = 0.0;
                for (slot, &d) in dims.iter().enumerate() {
                    let diff = x[d] - center[slot];
                    sq += diff * diff;
                }
                sq.sqrt() - radius
            }
            TargetShape::MinOf(shapes) => shapes
                .iter()
                .map(|s| s.eval(x))
                .fold(f64::INFINITY, f64::min),
        }
    }
}

fn effective_dims(dims: &[usize], n: usize) -> Vec<usize> {
    if dims.is_empty() {
        (0..n).collect()
    } else {
        dims.to_vec()
    }
}

impl fmt::Display for TargetShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn vec_str(v: &[f64]) -> String {
            let inner: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            format!("[{}]", inner.join(", "))
        }
        fn dims_str(v: &[usize]) -> String {
            let inner: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            format!("[{}]", inner.join(", "))
        }
        match self {
            TargetShape::Box { lo, hi, dims } => {
                if dims.is_empty() {
                    write!(f, "box({}, {})", vec_str(lo), vec_str(hi))
                } else {
                    write!(f, "box({}, {}, {})", vec_str(lo), vec_str(hi), dims_str(dims))
                }
            }
            TargetShape::CircleComplement {
                center,
                radius,
                dims,
            } => {
                if dims.is_empty() {
                    write!(f, "circle_complement({}, {})", vec_str(center), radius)
                } else {
                    write!(
                        f,
                        "circle_complement({}, {}, {})",
                        vec_str(center),
                        radius,
                        dims_str(dims)
                    )
                }
            }
            TargetShape::MinOf(shapes) => {
                let inner: Vec<String> = shapes.iter().map(|s| s.to_string()).collect();
                write!(f, "min_of({})", inner.join(", "))
            }
        }
    }
}

/// Samples a target shape onto a grid.
pub fn build_target_field(shape: &TargetShape, grid: Arc<Grid>) -> Result<ScalarField, ShapeError> {
    shape.validate(grid.ndim())?;
    Ok(ScalarField::from_fn(grid, |x| shape.eval(x))?)
}
