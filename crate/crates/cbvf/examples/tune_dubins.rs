// Scene-tuning scratch: CBVF-only (no stationary), quick rollout report.
use cbvf::experiment::*;
use cbvf::*;
use std::sync::Arc;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg_path = &args[1];
    let text = std::fs::read_to_string(cfg_path).unwrap();
    let exp = parse_experiment_config(&text).unwrap();
    let bench = Workbench::from_experiment(&exp).unwrap();
    std::fs::create_dir_all(&bench.out_dir).unwrap();
    let t = std::time::Instant::now();
    let (vf, _) = bench.solve_or_load(&exp, exp.gammas[0]).unwrap();
    println!("solve/load: {:?}", t.elapsed());
    let (traj, metrics) = roll_single(
        &bench, &exp, &vf, cbvf::PolicyKind::CbvfQp, exp.gammas[0], None, &exp.x0s[0],
    ).unwrap();
    println!(
        "cbvf_qp: reached={} min_l={:.4} min_B={:.4} exited={} relax={}",
        metrics.target_reached, metrics.min_target, metrics.min_barrier,
        metrics.exited_domain, metrics.relaxation_count
    );
    let n = traj.samples.len();
    for i in (0..n).step_by((n / 22).max(1)) {
        let s = &traj.samples[i];
        println!(
            "t={:7.3} x=({:6.2},{:6.2}) th={:5.2} u={:5.2} B={:10.3e} l={:7.3}",
            s.t, s.x[0], s.x[1], s.x[2], s.u[0], s.barrier, s.target
        );
    }
    let _ = Arc::strong_count(&vf);
}
