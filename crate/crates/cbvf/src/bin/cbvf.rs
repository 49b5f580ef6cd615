//! Config-driven command line for the toolkit: solve value functions,
//! roll out controllers, compare them, extract level sets, inspect and plot.
//!
//! Exit codes: 0 success, 1 config error, 2 numerical failure, 3 i/o error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cbvf::experiment::{
    describe, import_value_function, level_set_of, parse_experiment_config, run_experiment,
    write_level_set_csv, ContainerError, RunError, RunOptions,
};

#[derive(Parser)]
#[command(name = "cbvf", about = "Barrier-value functions: solve, filter, simulate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured value functions and write container files.
    Solve { config: PathBuf },
    /// Solve (or load cached) and roll out the configured controllers.
    Simulate { config: PathBuf },
    /// Run every configured controller and print a metrics table.
    Compare { config: PathBuf },
    /// Extract a zero-level contour from a stored value function.
    Levelset {
        vf_file: PathBuf,
        /// Time at which to evaluate the value function.
        #[arg(long)]
        time: f64,
        /// For 3D functions: fix one axis, e.g. --slice 2=1.57.
        #[arg(long, value_parser = parse_slice)]
        slice: Option<(usize, f64)>,
        /// Contour level (default 0).
        #[arg(long, default_value_t = 0.0)]
        level: f64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a stored value function's header.
    Info { vf_file: PathBuf },
    /// Run the experiment and render SVG plots.
    Plot { config: PathBuf },
}

fn parse_slice(s: &str) -> Result<(usize, f64), String> {
    let (dim, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected dim=value, got '{s}'"))?;
    let dim = dim
        .trim()
        .parse()
        .map_err(|_| format!("bad axis index '{dim}'"))?;
    let value = value
        .trim()
        .parse()
        .map_err(|_| format!("bad axis value '{value}'"))?;
    Ok((dim, value))
}

fn load_experiment(path: &PathBuf) -> Result<cbvf::experiment::Experiment, (i32, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| (3, format!("cannot read config {}: {e}", path.display())))?;
    parse_experiment_config(&text).map_err(|e| (1, e.to_string()))
}

fn load_vf(path: &PathBuf) -> Result<cbvf::ValueFunction, (i32, String)> {
    import_value_function(path).map_err(|e| {
        let code = match &e {
            ContainerError::Io(_) => 3,
            _ => 3,
        };
        (code, format!("{}: {e}", path.display()))
    })
}

fn run(cli: Cli) -> Result<(), (i32, String)> {
    let run_err = |e: RunError| (e.exit_code(), e.to_string());
    match cli.command {
        Command::Solve { config } => {
            let exp = load_experiment(&config)?;
            let summary = run_experiment(
                &exp,
                &RunOptions {
                    solve_only: true,
                    render_plots: false,
                },
            )
            .map_err(run_err)?;
            for (gamma, path) in &summary.value_function_paths {
                println!("gamma = {gamma}: {}", path.display());
            }
            if let Some(p) = &summary.stationary_path {
                println!("stationary: {}", p.display());
            }
            Ok(())
        }
        Command::Simulate { config } => {
            let exp = load_experiment(&config)?;
            let summary = run_experiment(&exp, &RunOptions::default()).map_err(run_err)?;
            for r in &summary.records {
                println!(
                    "gamma {} {} ({}) from {:?}: min_l = {:.4}, min_B = {:.4}, reached = {}",
                    r.gamma,
                    r.controller.name(),
                    r.disturbance,
                    r.x0,
                    r.metrics.min_target,
                    r.metrics.min_barrier,
                    r.metrics.target_reached,
                );
            }
            if let Some(p) = &summary.metrics_path {
                println!("metrics: {}", p.display());
            }
            Ok(())
        }
        Command::Compare { config } => {
            let exp = load_experiment(&config)?;
            let summary = run_experiment(&exp, &RunOptions::default()).map_err(run_err)?;
            print!("{}", summary.metrics_table(&exp));
            Ok(())
        }
        Command::Levelset {
            vf_file,
            time,
            slice,
            level,
            out,
        } => {
            let vf = load_vf(&vf_file)?;
            let lines =
                level_set_of(&vf, time, slice, level).map_err(|e| (e.exit_code(), e.to_string()))?;
            write_level_set_csv(&lines, &out).map_err(|e| (3, e.to_string()))?;
            println!("{} polylines -> {}", lines.len(), out.display());
            Ok(())
        }
        Command::Info { vf_file } => {
            let vf = load_vf(&vf_file)?;
            print!("{}", describe(&vf));
            Ok(())
        }
        Command::Plot { config } => {
            let exp = load_experiment(&config)?;
            let summary = run_experiment(
                &exp,
                &RunOptions {
                    solve_only: false,
                    render_plots: true,
                },
            )
            .map_err(run_err)?;
            for p in &summary.plot_paths {
                println!("plot: {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code as u8)
        }
    }
}
