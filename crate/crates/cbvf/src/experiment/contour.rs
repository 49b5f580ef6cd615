//! Marching-squares extraction of level-set polylines from 2D fields.
//!
//! Crossing points are placed by linear interpolation along cell edges, so
//! every emitted vertex sits exactly on a linearly interpolated zero of the
//! shifted field. Saddle cells are disambiguated by the cell average.
//! Segments are joined end to end into polylines; joining keys on exact
//! coordinate bits, which is safe because a shared edge produces bitwise
//! identical crossings in both adjacent cells.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::grid::ScalarField;

#[derive(Debug, Error)]
pub enum ContourError {
    #[error("level-set extraction needs a 2D field, got {0} dimensions")]
    NotTwoDimensional(usize),
}

/// Ordered run of 2D points (state units) tracing one contour piece.
/// Consecutive points lie within one cell diagonal of each other.
pub type LevelSetPolyline = Vec<[f64; 2]>;

/// Extracts the `level` isocontour of a 2D field as joined polylines.
pub fn extract_level_set(
    field: &ScalarField,
    level: f64,
) -> Result<Vec<LevelSetPolyline>, ContourError> {
    let grid = field.grid();
    if grid.ndim() != 2 {
        return Err(ContourError::NotTwoDimensional(grid.ndim()));
    }
    let (nx, ny) = (grid.shape()[0], grid.shape()[1]);
    let v = field.values();
    let at = |i: usize, j: usize| v[i * ny + j] - level;
    let xc = |i: usize| grid.coord(0, i);
    let yc = |j: usize| grid.coord(1, j);

    // Crossing on the segment between two nodes, linear in the values.
    let cross = |a: f64, b: f64, pa: f64, pb: f64| -> f64 {
        let t = a / (a - b);
        pa + t * (pb - pa)
    };

    let mut segments: Vec<([f64; 2], [f64; 2])> = Vec::new();
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            // Corners: sw = (i, j), se = (i+1, j), nw = (i, j+1), ne = (i+1, j+1)
            // in state coordinates x along dim 0 and y along dim 1.
            let sw = at(i, j);
            let se = at(i + 1, j);
            let nw = at(i, j + 1);
            let ne = at(i + 1, j + 1);
            let inside =
                |z: f64| z >= 0.0;
            let code = (inside(sw) as usize)
                | (inside(se) as usize) << 1
                | (inside(ne) as usize) << 2
                | (inside(nw) as usize) << 3;
            if code == 0 || code == 15 {
                continue;
            }
            // Edge crossing points (only valid where the edge changes sign).
            let south = || [cross(sw, se, xc(i), xc(i + 1)), yc(j)];
            let north = || [cross(nw, ne, xc(i), xc(i + 1)), yc(j + 1)];
            let west = || [xc(i), cross(sw, nw, yc(j), yc(j + 1))];
            let east = || [xc(i + 1), cross(se, ne, yc(j), yc(j + 1))];
            match code {
                1 => segments.push((west(), south())),
                2 => segments.push((south(), east())),
                3 => segments.push((west(), east())),
                4 => segments.push((east(), north())),
                6 => segments.push((south(), north())),
                7 => segments.push((west(), north())),
                8 => segments.push((north(), west())),
                9 => segments.push((north(), south())),
                11 => segments.push((north(), east())),
                12 => segments.push((east(), west())),
                13 => segments.push((south(), east())),
                14 => segments.push((west(), south())),
                5 | 10 => {
                    // Saddle: connectivity from the cell average.
                    let center_inside = inside(0.25 * (sw + se + nw + ne));
                    if code == 5 {
                        if center_inside {
                            segments.push((west(), north()));
                            segments.push((east(), south()));
                        } else {
                            segments.push((west(), south()));
                            segments.push((east(), north()));
                        }
                    } else if center_inside {
                        segments.push((south(), west()));
                        segments.push((north(), east()));
                    } else {
                        segments.push((south(), east()));
                        segments.push((north(), west()));
                    }
                }
                _ => unreachable!("marching-squares case {code}"),
            }
        }
    }
    Ok(join_segments(segments))
}

fn key(p: [f64; 2]) -> (u64, u64) {
    (p[0].to_bits(), p[1].to_bits())
}

/// Joins segments sharing endpoints into polylines, treating segments as
/// undirected (the per-cell emission order carries no global orientation).
/// Deterministic: seeds run in emission order and lookups use ordered maps.
fn join_segments(segments: Vec<([f64; 2], [f64; 2])>) -> Vec<LevelSetPolyline> {
    // endpoint -> (segment index, endpoint side)
    let mut touching: BTreeMap<(u64, u64), Vec<(usize, bool)>> = BTreeMap::new();
    for (idx, (a, b)) in segments.iter().enumerate() {
        touching.entry(key(*a)).or_default().push((idx, false));
        touching.entry(key(*b)).or_default().push((idx, true));
    }
    let mut used = vec![false; segments.len()];
    let mut take = |k: (u64, u64), used: &[bool]| -> Option<(usize, bool)> {
        let bucket = touching.get_mut(&k)?;
        while let Some(entry) = bucket.pop() {
            if !used[entry.0] {
                return Some(entry);
            }
        }
        None
    };
    let mut polylines = Vec::new();
    for seed in 0..segments.len() {
        if used[seed] {
            continue;
        }
        used[seed] = true;
        let (a, b) = segments[seed];
        let mut line: Vec<[f64; 2]> = vec![a, b];
        // Grow at the tail, flipping segments as needed.
        loop {
            let tail = key(*line.last().unwrap());
            match take(tail, &used) {
                Some((idx, side)) => {
                    used[idx] = true;
                    let (s, e) = segments[idx];
                    line.push(if side { s } else { e });
                }
                None => break,
            }
        }
        // Grow at the head.
        loop {
            let head = key(line[0]);
            match take(head, &used) {
                Some((idx, side)) => {
                    used[idx] = true;
                    let (s, e) = segments[idx];
                    line.insert(0, if side { s } else { e });
                }
                None => break,
            }
        }
        polylines.push(line);
    }
    polylines
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, GridSpec, ScalarField};

    fn field_2d(nx: usize, ny: usize, f: impl Fn(&[f64]) -> f64) -> ScalarField {
        let grid = Grid::new(GridSpec::rectangular(
            vec![-2.0, -2.0],
            vec![2.0, 2.0],
            vec![nx, ny],
        ))
        .unwrap()
        .into_shared();
        ScalarField::from_fn(grid, f).unwrap()
    }

    #[test]
    fn all_positive_field_yields_nothing() {
        let f = field_2d(9, 9, |_| 1.0);
        assert!(extract_level_set(&f, 0.0).unwrap().is_empty());
    }

    #[test]
    fn rejects_non_2d() {
        let grid = Grid::new(GridSpec::rectangular(vec![0.0], vec![1.0], vec![5]))
            .unwrap()
            .into_shared();
        let f = ScalarField::constant(grid, 0.0).unwrap();
        assert!(matches!(
            extract_level_set(&f, 0.0),
            Err(ContourError::NotTwoDimensional(1))
        ));
    }

    #[test]
    fn vertical_interface_crosses_midpoints() {
        // 2x2-node grid, sign change along dim 0: one segment through the
        // midpoints of the two dim-0 edges.
        let grid = Grid::new(GridSpec::rectangular(
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![3, 3],
        ))
        .unwrap()
        .into_shared();
        let f = ScalarField::from_fn(grid, |x| if x[0] < 0.4 { -1.0 } else { 1.0 }).unwrap();
        let lines = extract_level_set(&f, 0.0).unwrap();
        assert_eq!(lines.len(), 1);
        let line = &lines[0];
        for p in line {
            assert!((p[0] - 0.25).abs() < 1e-12, "crossing x {}", p[0]);
        }
        // Joined across both cells: spans y from 0 to 1.
        let ys: Vec<f64> = line.iter().map(|p| p[1]).collect();
        assert!(ys.iter().cloned().fold(f64::INFINITY, f64::min) == 0.0);
        assert!(ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) == 1.0);
    }

    #[test]
    fn emitted_points_interpolate_to_the_level() {
        let f = field_2d(41, 41, |x| x[0] * x[0] + 0.5 * x[1] * x[1] - 1.0);
        for level in [0.0, 0.35, -0.25] {
            let lines = extract_level_set(&f, level).unwrap();
            assert!(!lines.is_empty());
            let mut checked = 0;
            for line in &lines {
                for p in line {
                    let v = f.interpolate(p).unwrap();
                    let scale = 1.0 + level.abs();
                    assert!(
                        (v - level).abs() <= 1e-9 * scale,
                        "point {:?} has value {v}, level {level}",
                        p
                    );
                    checked += 1;
                }
            }
            assert!(checked > 20);
        }
    }

    #[test]
    fn box_contour_tracks_rectangle() {
        use crate::experiment::shapes::{build_target_field, TargetShape};
        let grid = Grid::new(GridSpec::rectangular(
            vec![-2.0, -2.0],
            vec![2.0, 2.0],
            vec![81, 81],
        ))
        .unwrap()
        .into_shared();
        let shape = TargetShape::bounding_box(vec![-1.0, -0.5], vec![1.0, 0.5]);
        let f = build_target_field(&shape, grid.clone()).unwrap();
        let lines = extract_level_set(&f, 0.0).unwrap();
        let cell = grid.dx()[0].max(grid.dx()[1]);
        let mut count = 0;
        for line in &lines {
            for p in line {
                // Every contour vertex within one cell of the true rectangle.
                let dist_x = (p[0].abs() - 1.0).abs();
                let dist_y = (p[1].abs() - 0.5).abs();
                assert!(
                    dist_x.min(dist_y) <= cell + 1e-12,
                    "point {:?} off the rectangle boundary",
                    p
                );
                count += 1;
            }
        }
        assert!(count > 40);
    }

    #[test]
    fn closed_contour_joins_into_single_loop() {
        // Radius chosen so the contour does not pass exactly through grid
        // nodes (exact node zeros create junction vertices that legitimately
        // split the loop).
        let f = field_2d(61, 61, |x| 0.97 - (x[0] * x[0] + x[1] * x[1]).sqrt());
        let lines = extract_level_set(&f, 0.0).unwrap();
        assert_eq!(lines.len(), 1, "circle should join into one polyline");
        let line = &lines[0];
        // Closed: endpoints coincide.
        let first = line[0];
        let last = line[line.len() - 1];
        assert_eq!(key(first), key(last));
        // Consecutive points within one cell diagonal.
        let diag = (2.0f64 * (4.0 / 60.0) * (4.0 / 60.0)).sqrt();
        for w in line.windows(2) {
            let d = ((w[0][0] - w[1][0]).powi(2) + (w[0][1] - w[1][1]).powi(2)).sqrt();
            assert!(d <= diag + 1e-12);
        }
    }

    #[test]
    fn node_exact_zeros_split_but_stay_on_contour() {
        // The radius-1 circle crosses nodes exactly at (+-1, 0), (0, +-1);
        // the loop splits at those junctions but every piece still traces
        // the circle.
        let f = field_2d(61, 61, |x| 1.0 - (x[0] * x[0] + x[1] * x[1]).sqrt());
        let lines = extract_level_set(&f, 0.0).unwrap();
        assert!(!lines.is_empty() && lines.len() <= 8, "{} pieces", lines.len());
        for line in &lines {
            for p in line {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                assert!((r - 1.0).abs() < 0.08, "point {:?} off the circle", p);
            }
        }
    }
}
