//! Value-function container files.
//!
//! Layout: the magic line `CBVF1`, a decimal-text header (dimension count;
//! one `lo hi n periodic` line per dimension; gamma; model name; slice
//! count; one line of stored times), a blank line, then the raw payload:
//! little-endian IEEE-754 64-bit values, slices in stored-time order, each
//! row-major with the last dimension fastest. Header floats print in
//! shortest round-trip form, so import/export is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::grid::{Grid, GridSpec, ScalarField};
use crate::solver::ValueFunction;

pub const MAGIC: &str = "CBVF1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected '{MAGIC}', found '{found}'")]
    BadMagic { found: String },
    #[error("header line {line}: {what}")]
    BadHeader { line: usize, what: String },
    #[error("dimension mismatch: header declares {declared} dims, found {found} axis lines")]
    DimensionMismatch { declared: usize, found: usize },
    #[error("times count {times} does not match declared slice count {slices}")]
    TimesMismatch { times: usize, slices: usize },
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after payload: expected {expected} bytes total")]
    TrailingBytes { expected: usize },
    #[error("invalid grid in header: {0}")]
    BadGrid(#[from] crate::grid::GridError),
    #[error("invalid value function in file: {0}")]
    BadValueFunction(#[from] crate::solver::SolveError),
}

/// Writes a value function container.
pub fn export_value_function(vf: &ValueFunction, path: &Path) -> Result<(), ContainerError> {
    let mut w = BufWriter::new(File::create(path)?);
    let grid = vf.grid();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{}", grid.ndim())?;
    for dim in 0..grid.ndim() {
        writeln!(
            w,
            "{} {} {} {}",
            grid.lo()[dim],
            grid.hi()[dim],
            grid.shape()[dim],
            u8::from(grid.periodic()[dim]),
        )?;
    }
    writeln!(w, "{}", vf.gamma())?;
    writeln!(w, "{}", vf.model_name())?;
    writeln!(w, "{}", vf.times().len())?;
    let times: Vec<String> = vf.times().iter().map(|t| t.to_string()).collect();
    writeln!(w, "{}", times.join(" "))?;
    writeln!(w)?;
    for slice in vf.slices() {
        for &v in slice.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Convenience: wraps a single stationary slice (time 0 only) so it travels
/// in the same container format.
pub fn stationary_value_function(
    field: &ScalarField,
    model_name: &str,
) -> Result<ValueFunction, ContainerError> {
    Ok(ValueFunction::from_parts(
        field.grid().clone(),
        vec![0.0],
        vec![field.clone()],
        0.0,
        model_name.to_string(),
    )?)
}

struct HeaderReader<R> {
    inner: R,
    line: usize,
}

impl<R: BufRead> HeaderReader<R> {
    fn next_line(&mut self) -> Result<String, ContainerError> {
        let mut buf = String::new();
        let n = self.inner.read_line(&mut buf)?;
        self.line += 1;
        if n == 0 {
            return Err(ContainerError::BadHeader {
                line: self.line,
                what: "unexpected end of header".into(),
            });
        }
        Ok(buf.trim_end_matches(['\n', '\r']).to_string())
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, ContainerError> {
        let line = self.next_line()?;
        line.trim().parse().map_err(|_| ContainerError::BadHeader {
            line: self.line,
            what: format!("cannot parse {what} from '{line}'"),
        })
    }
}

/// Reads a value function container back; bit-exact against the export.
pub fn import_value_function(path: &Path) -> Result<ValueFunction, ContainerError> {
    let mut r = HeaderReader {
        inner: BufReader::new(File::open(path)?),
        line: 0,
    };
    let magic = r.next_line()?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic { found: magic });
    }
    let ndim: usize = r.parse("dimension count")?;
    if !(1..=crate::grid::MAX_DIMS).contains(&ndim) {
        return Err(ContainerError::DimensionMismatch {
            declared: ndim,
            found: ndim,
        });
    }
    let mut lo = Vec::with_capacity(ndim);
    let mut hi = Vec::with_capacity(ndim);
    let mut n = Vec::with_capacity(ndim);
    let mut periodic = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let line = r.next_line()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(ContainerError::BadHeader {
                line: r.line,
                what: format!("axis line needs 'lo hi n periodic', got '{line}'"),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, ContainerError> {
            s.parse().map_err(|_| ContainerError::BadHeader {
                line: r.line,
                what: format!("cannot parse {what} from '{s}'"),
            })
        };
        lo.push(parse_f(parts[0], "axis lo")?);
        hi.push(parse_f(parts[1], "axis hi")?);
        n.push(parts[2].parse().map_err(|_| ContainerError::BadHeader {
            line: r.line,
            what: format!("cannot parse node count from '{}'", parts[2]),
        })?);
        periodic.push(match parts[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(ContainerError::BadHeader {
                    line: r.line,
                    what: format!("periodic flag must be 0 or 1, got '{other}'"),
                })
            }
        });
    }
    let gamma: f64 = r.parse("gamma")?;
    let model_name = r.next_line()?;
    let slice_count: usize = r.parse("slice count")?;
    let times_line = r.next_line()?;
    let times: Vec<f64> = times_line
        .split_whitespace()
        .map(|s| {
            s.parse().map_err(|_| ContainerError::BadHeader {
                line: r.line,
                what: format!("cannot parse time '{s}'"),
            })
        })
        .collect::<Result<_, _>>()?;
    if times.len() != slice_count {
        return Err(ContainerError::TimesMismatch {
            times: times.len(),
            slices: slice_count,
        });
    }
    let blank = r.next_line()?;
    if !blank.trim().is_empty() {
        return Err(ContainerError::BadHeader {
            line: r.line,
            what: format!("expected blank line before payload, got '{blank}'"),
        });
    }

    let grid = Grid::new(GridSpec::new(lo, hi, n, periodic))?.into_shared();
    let node_count = grid.node_count();
    let expected = slice_count * node_count * 8;
    let mut payload = Vec::with_capacity(expected);
    r.inner.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(ContainerError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(ContainerError::TrailingBytes { expected });
    }
    let mut slices = Vec::with_capacity(slice_count);
    for s in 0..slice_count {
        let mut values = Vec::with_capacity(node_count);
        let base = s * node_count * 8;
        for i in 0..node_count {
            let mut bytes = [0u8; 8];
            bytes.copy_from_slice(&payload[base + i * 8..base + i * 8 + 8]);
            values.push(f64::from_le_bytes(bytes));
        }
        slices.push(ScalarField::new(grid.clone(), values)?);
    }
    Ok(ValueFunction::from_parts(
        grid,
        times,
        slices,
        gamma,
        model_name,
    )?)
}

/// Grid + metadata summary for the `info` command.
pub fn describe(vf: &ValueFunction) -> String {
    let grid: &Arc<Grid> = vf.grid();
    let mut out = String::new();
    out.push_str(&format!("format: {MAGIC}\n"));
    out.push_str(&format!("model: {}\n", vf.model_name()));
    out.push_str(&format!("gamma: {}\n", vf.gamma()));
    out.push_str(&format!("dimensions: {}\n", grid.ndim()));
    for dim in 0..grid.ndim() {
        out.push_str(&format!(
            "  axis {dim}: [{}, {}] n={} dx={}{}\n",
            grid.lo()[dim],
            grid.hi()[dim],
            grid.shape()[dim],
            grid.dx()[dim],
            if grid.periodic()[dim] { " periodic" } else { "" },
        ));
    }
    out.push_str(&format!(
        "slices: {} over times [{}, {}]\n",
        vf.times().len(),
        vf.horizon(),
        vf.times()[0],
    ));
    let nodes = grid.node_count();
    out.push_str(&format!(
        "payload: {} nodes/slice, {} bytes\n",
        nodes,
        nodes * vf.times().len() * 8
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ControlAffineModel;
    use crate::solver::{solve_cbvf, SolveConfig};

    fn sample_vf() -> ValueFunction {
        let m = ControlAffineModel::single_integrator_1d(1.0, 0.25).unwrap();
        let grid = Grid::new(GridSpec::rectangular(vec![-2.0], vec![2.0], vec![41]))
            .unwrap()
            .into_shared();
        let l = ScalarField::from_fn(grid, |x| 1.0 - x[0].abs()).unwrap();
        solve_cbvf(&m, &l, &SolveConfig::new(0.3, -1.0)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let vf = sample_vf();
        let dir = std::env::temp_dir().join("cbvf_container_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.cbvf");
        export_value_function(&vf, &path).unwrap();
        let back = import_value_function(&path).unwrap();
        assert_eq!(back.model_name(), vf.model_name());
        assert_eq!(back.gamma().to_bits(), vf.gamma().to_bits());
        assert_eq!(back.times().len(), vf.times().len());
        for (a, b) in back.times().iter().zip(vf.times()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.grid().spec(), vf.grid().spec());
        for (sa, sb) in back.slices().iter().zip(vf.slices()) {
            for (a, b) in sa.values().iter().zip(sb.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn wrong_magic_detected() {
        let dir = std::env::temp_dir().join("cbvf_container_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("magic.cbvf");
        std::fs::write(&path, b"NOPE\nrest\n").unwrap();
        assert!(matches!(
            import_value_function(&path),
            Err(ContainerError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let vf = sample_vf();
        let dir = std::env::temp_dir().join("cbvf_container_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.cbvf");
        export_value_function(&vf, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 13]).unwrap();
        match import_value_function(&cut) {
            Err(ContainerError::Truncated { expected, found }) => {
                assert_eq!(expected, vf.times().len() * vf.grid().node_count() * 8);
                assert_eq!(found, expected - 13);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn header_dimension_mismatch_detected() {
        let dir = std::env::temp_dir().join("cbvf_container_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dims.cbvf");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "{MAGIC}").unwrap();
        writeln!(f, "7").unwrap();
        drop(f);
        assert!(matches!(
            import_value_function(&path),
            Err(ContainerError::DimensionMismatch { declared: 7, .. })
        ));
    }

    #[test]
    fn stationary_slice_travels_in_container() {
        let grid = Grid::new(GridSpec::rectangular(vec![-1.0], vec![1.0], vec![11]))
            .unwrap()
            .into_shared();
        let field = ScalarField::from_fn(grid, |x| x[0]).unwrap();
        let vf = stationary_value_function(&field, "single_integrator_1d").unwrap();
        let dir = std::env::temp_dir().join("cbvf_container_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("stationary.cbvf");
        export_value_function(&vf, &path).unwrap();
        let back = import_value_function(&path).unwrap();
        assert_eq!(back.times(), &[0.0]);
        for (a, b) in back.slice(0).values().iter().zip(field.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
