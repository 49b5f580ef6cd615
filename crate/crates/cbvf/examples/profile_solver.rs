use cbvf::*;
use std::time::Instant;

fn main() {
    let model = ControlAffineModel::dubins_car(2.0).unwrap();
    let grid = Grid::new(GridSpec::new(
        vec![-4.0, -4.0, 0.0],
        vec![4.0, 4.0, 2.0 * std::f64::consts::PI],
        vec![81, 81, 60],
        vec![false, false, true],
    )).unwrap().into_shared();
    let l = ScalarField::from_fn(grid.clone(), |x| {
        let wall = (x[0] + 4.0).min(4.0 - x[0]).min(x[1] + 4.0).min(4.0 - x[1]);
        let disk = (x[0] * x[0] + x[1] * x[1]).sqrt() - 1.0;
        wall.min(disk)
    }).unwrap();

    // Short horizon: measure per-step cost of the RK3 march.
    let mut cfg = SolveConfig::new(10.0, -0.5);
    cfg.store_stride = Some(1_000_000);
    let t = Instant::now();
    let vf = solve_cbvf(&model, &l, &cfg).unwrap();
    let steps = (0.5f64 / 0.007285).ceil();
    println!(
        "rk3 march: {:?} for ~{} steps -> {:.1} ms/step ({} nodes)",
        t.elapsed(),
        steps,
        t.elapsed().as_secs_f64() * 1000.0 / steps,
        vf.grid().node_count()
    );

    // Stationary march with a step cap to count steps per tolerance level.
    for tol in [3e-3, 1e-3] {
        let mut scfg = SolveConfig::new(0.0, -1.0);
        scfg.stationary_tol = tol;
        scfg.time_scheme = TimeScheme::Euler;
        scfg.max_steps = 60_000;
        let t = Instant::now();
        match solve_stationary(&model, &l, &scfg) {
            Ok(_) => println!("stationary tol {tol}: {:?}", t.elapsed()),
            Err(e) => println!("stationary tol {tol}: {:?} -> {e}", t.elapsed()),
        }
    }
}
