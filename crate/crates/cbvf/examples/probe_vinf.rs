use cbvf::experiment::import_value_function;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let vf = import_value_function(std::path::Path::new(&args[1])).unwrap();
    let t: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    println!("B(x, y, theta; t={t}) probes:");
    for (x, y) in [(1.05, 1.05), (1.5, 1.5), (2.0, 2.0), (2.0, 0.3), (0.0, -2.0), (-2.0, -2.0), (2.6, 2.6)] {
        let mut line = format!("({x:5.2},{y:5.2}): ");
        for deg in [0, 45, 90, 135, 180, 225, 270, 315] {
            let th = (deg as f64).to_radians();
            let v = vf.value_at(&[x, y, th], t).unwrap();
            line.push_str(&format!("{deg:>3}:{v:8.2} "));
        }
        println!("{line}");
    }
}
