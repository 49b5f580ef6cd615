//! Trajectory CSV export.
//!
//! Columns: `t, x_0.., u_0.., d_0.., B, l, mode`. Floats print with 17
//! significant digits, which round-trips 64-bit values exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::control::PolicyKind;
use crate::sim::{Sample, Trajectory};

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected {expected} fields, got {got}")]
    FieldCount {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: cannot parse '{field}' as a number")]
    BadNumber { line: usize, field: String },
    #[error("line {line}: unknown mode '{mode}'")]
    BadMode { line: usize, mode: String },
    #[error("missing header line")]
    MissingHeader,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn mode_from_name(name: &str) -> Option<PolicyKind> {
    Some(match name {
        "reference" => PolicyKind::Reference,
        "optimal" => PolicyKind::Optimal,
        "least_restrictive" => PolicyKind::LeastRestrictive,
        "cbvf_qp" => PolicyKind::CbvfQp,
        "cbf_qp" => PolicyKind::CbfQp,
        _ => return None,
    })
}

pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<(), CsvError> {
    let mut w = BufWriter::new(File::create(path)?);
    let (n_x, n_u, n_d) = match traj.samples.first() {
        Some(s) => (s.x.len(), s.u.len(), s.d.len()),
        None => (0, 0, 0),
    };
    let mut header = vec!["t".to_string()];
    header.extend((0..n_x).map(|i| format!("x_{i}")));
    header.extend((0..n_u).map(|i| format!("u_{i}")));
    header.extend((0..n_d).map(|i| format!("d_{i}")));
    header.push("B".to_string());
    header.push("l".to_string());
    header.push("mode".to_string());
    writeln!(w, "{}", header.join(","))?;
    for s in &traj.samples {
        let mut fields = vec![fmt_f64(s.t)];
        fields.extend(s.x.iter().map(|&v| fmt_f64(v)));
        fields.extend(s.u.iter().map(|&v| fmt_f64(v)));
        fields.extend(s.d.iter().map(|&v| fmt_f64(v)));
        fields.push(fmt_f64(s.barrier));
        fields.push(fmt_f64(s.target));
        fields.push(s.mode.name().to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads samples back from a trajectory CSV; dimensions come from the header.
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<Sample>, CsvError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or(CsvError::MissingHeader)??;
    let names: Vec<&str> = header.split(',').collect();
    let n_x = names.iter().filter(|n| n.starts_with("x_")).count();
    let n_u = names.iter().filter(|n| n.starts_with("u_")).count();
    let n_d = names.iter().filter(|n| n.starts_with("d_")).count();
    let expected = 1 + n_x + n_u + n_d + 3;
    let mut samples = Vec::new();
    for (line_idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = line_idx + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(CsvError::FieldCount {
                line: line_no,
                expected,
                got: fields.len(),
            });
        }
        let num = |s: &str| -> Result<f64, CsvError> {
            s.parse().map_err(|_| CsvError::BadNumber {
                line: line_no,
                field: s.to_string(),
            })
        };
        let mut cursor = 0;
        let t = num(fields[cursor])?;
        cursor += 1;
        let x: Vec<f64> = fields[cursor..cursor + n_x]
            .iter()
            .map(|s| num(s))
            .collect::<Result<_, _>>()?;
        cursor += n_x;
        let u: Vec<f64> = fields[cursor..cursor + n_u]
            .iter()
            .map(|s| num(s))
            .collect::<Result<_, _>>()?;
        cursor += n_u;
        let d: Vec<f64> = fields[cursor..cursor + n_d]
            .iter()
            .map(|s| num(s))
            .collect::<Result<_, _>>()?;
        cursor += n_d;
        let barrier = num(fields[cursor])?;
        let target = num(fields[cursor + 1])?;
        let mode = mode_from_name(fields[cursor + 2]).ok_or_else(|| CsvError::BadMode {
            line: line_no,
            mode: fields[cursor + 2].to_string(),
        })?;
        samples.push(Sample {
            t,
            x,
            u,
            d,
            barrier,
            target,
            mode,
        });
    }
    Ok(samples)
}

/// Level-set polylines as CSV: `piece, x, y` rows.
pub fn write_level_set_csv(
    polylines: &[crate::experiment::contour::LevelSetPolyline],
    path: &Path,
) -> Result<(), CsvError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "piece,x,y")?;
    for (piece, line) in polylines.iter().enumerate() {
        for p in line {
            writeln!(w, "{piece},{},{}", fmt_f64(p[0]), fmt_f64(p[1]))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digit_round_trip() {
        let traj = Trajectory {
            samples: vec![
                Sample {
                    t: -1.0 / 3.0,
                    x: vec![std::f64::consts::PI, -1.2345678901234567e-8],
                    u: vec![0.1],
                    d: vec![-0.2],
                    barrier: 0.7071067811865476,
                    target: f64::MIN_POSITIVE,
                    mode: PolicyKind::CbvfQp,
                },
                Sample {
                    t: 0.0,
                    x: vec![1.0, 2.0],
                    u: vec![-0.5],
                    d: vec![0.0],
                    barrier: -3.3e300,
                    target: 1.0,
                    mode: PolicyKind::Reference,
                },
            ],
            dt_sim: 0.01,
            exited_domain: false,
        };
        let dir = std::env::temp_dir().join("cbvf_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.csv");
        write_trajectory_csv(&traj, &path).unwrap();
        let back = read_trajectory_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&traj.samples) {
            assert_eq!(a.t.to_bits(), b.t.to_bits());
            for (p, q) in a.x.iter().zip(&b.x) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
            assert_eq!(a.barrier.to_bits(), b.barrier.to_bits());
            assert_eq!(a.target.to_bits(), b.target.to_bits());
            assert_eq!(a.mode, b.mode);
        }
    }

    #[test]
    fn malformed_rows_are_located() {
        let dir = std::env::temp_dir().join("cbvf_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "t,x_0,u_0,B,l,mode\n0.0,1.0,xyz,0.5,0.5,reference\n").unwrap();
        match read_trajectory_csv(&path) {
            Err(CsvError::BadNumber { line: 2, field }) => assert_eq!(field, "xyz"),
            other => panic!("expected BadNumber, got {other:?}"),
        }
        std::fs::write(&path, "t,x_0,u_0,B,l,mode\n0.0,1.0,0.0,0.5,0.5,warp\n").unwrap();
        assert!(matches!(
            read_trajectory_csv(&path),
            Err(CsvError::BadMode { line: 2, .. })
        ));
    }
}
