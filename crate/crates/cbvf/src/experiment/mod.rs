//! Config-driven experiment pipeline: solve (with file caching), roll out
//! controllers, export artifacts, and render plots.
//!
//! All outputs are deterministic for a fixed config: runs iterate in config
//! order, files are named from run identifiers, and text artifacts use
//! round-trip float formatting. The output directory can be overridden with
//! the `CBVF_OUT_DIR` environment variable.

pub mod config;
pub mod container;
pub mod contour;
pub mod shapes;
pub mod svg;
pub mod trajectory_csv;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::control::{
    cbf_qp_policy, cbvf_qp_policy, constant_reference, default_switch_margin, heading_reference,
    least_restrictive_policy, optimal_safe_policy, pd_position_reference, Policy,
    PolicyBuildError, PolicyError, PolicyKind,
};
use crate::grid::{Grid, GridError, ScalarField};
use crate::model::{ControlAffineModel, ModelError};
use crate::sim::{
    simulate, trajectory_metrics, worst_case_disturbance, DisturbanceStrategy, Metrics, SimError,
    Trajectory,
};
use crate::solver::{
    dissipation_bounds, solve_cbvf, solve_stationary, SolveConfig, SolveError, TimeScheme,
    ValueFunction,
};

pub use config::{
    default_experiment, experiment_to_config, parse_experiment_config, ConfigError,
    DisturbanceSpec, Experiment, ModelSpec, ReferenceSpec,
};
pub use container::{
    describe, export_value_function, import_value_function, stationary_value_function,
    ContainerError,
};
pub use contour::{extract_level_set, ContourError, LevelSetPolyline};
pub use shapes::{build_target_field, ShapeError, TargetShape};
pub use svg::{render_plot_svg, AxisSpec, PlotError, PlotLayer};
pub use trajectory_csv::{
    read_trajectory_csv, write_level_set_csv, write_trajectory_csv, CsvError,
};

/// Environment variable that overrides the config's output directory.
pub const OUT_DIR_ENV: &str = "CBVF_OUT_DIR";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("model setup failed: {0}")]
    Model(#[from] ModelError),
    #[error("grid setup failed: {0}")]
    Grid(#[from] GridError),
    #[error("target setup failed: {0}")]
    Shape(#[from] ShapeError),
    #[error("solve failed ({context}): {source}")]
    Solve {
        context: String,
        #[source]
        source: SolveError,
    },
    #[error("controller setup failed: {0}")]
    PolicyBuild(#[from] PolicyBuildError),
    #[error("rollout failed ({context}): {source}")]
    Sim {
        context: String,
        #[source]
        source: SimError,
    },
    #[error("policy evaluation failed: {0}")]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Contour(#[from] ContourError),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// Process exit code category: 1 config, 2 numerical, 3 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_)
            | RunError::Model(_)
            | RunError::Grid(_)
            | RunError::Shape(_)
            | RunError::PolicyBuild(_) => 1,
            RunError::Solve { .. } | RunError::Sim { .. } | RunError::Policy(_) => 2,
            RunError::Container(ContainerError::Io(_)) | RunError::Io { .. } => 3,
            RunError::Container(_) => 3,
            RunError::Csv(CsvError::Io(_)) => 3,
            RunError::Csv(_) => 3,
            RunError::Contour(_) | RunError::Plot(_) => 2,
        }
    }
}

/// One rollout's identity and outcome.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub gamma: f64,
    pub controller: PolicyKind,
    pub disturbance: String,
    pub x0: Vec<f64>,
    pub metrics: Metrics,
    pub trajectory_path: PathBuf,
}

/// Everything a finished experiment produced.
#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub value_function_paths: Vec<(f64, PathBuf)>,
    pub stationary_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub plot_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after solving and exporting value functions.
    pub solve_only: bool,
    /// Also render SVG plots.
    pub render_plots: bool,
}

fn gamma_tag(gamma: f64) -> String {
    gamma.to_string().replace('-', "m")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Resolved artifacts shared by the run phases.
pub struct Workbench {
    pub model: ControlAffineModel,
    pub grid: Arc<Grid>,
    pub target: ScalarField,
    pub out_dir: PathBuf,
    pub solver_dt: f64,
}

impl Workbench {
    pub fn from_experiment(exp: &Experiment) -> Result<Self, RunError> {
        let model = exp.model.build()?;
        let grid = Grid::new(exp.grid.clone())?.into_shared();
        let target = build_target_field(&exp.target, grid.clone())?;
        let out_dir = match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => exp.out_dir.clone(),
        };
        let alpha = dissipation_bounds(&model, &grid);
        let sum: f64 = alpha
            .iter()
            .zip(grid.dx())
            .map(|(&a, &dx)| a / dx)
            .sum();
        let solver_dt = if sum > 0.0 {
            exp.cfl / sum
        } else {
            -exp.horizon
        };
        Ok(Self {
            model,
            grid,
            target,
            out_dir,
            solver_dt,
        })
    }

    fn solve_config(&self, exp: &Experiment, gamma: f64) -> SolveConfig {
        SolveConfig {
            gamma,
            horizon: exp.horizon,
            cfl: exp.cfl,
            time_scheme: exp.scheme,
            store_stride: exp.store_stride,
            stationary_tol: exp.stationary_tol,
            max_steps: exp.max_steps,
        }
    }

    fn vf_path(&self, gamma: f64) -> PathBuf {
        self.out_dir.join(format!("vf_g{}.cbvf", gamma_tag(gamma)))
    }

    fn stationary_file(&self) -> PathBuf {
        // Content-addressed by the target samples so a target change never
        // reuses a stale stationary solve (its slices cannot be validated
        // against the target the way finite-horizon terminal slices can).
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for v in self.target.values() {
            for byte in v.to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        self.out_dir.join(format!("vinf_{hash:016x}.cbvf"))
    }

    /// Load a cached solve when its header matches the request, else solve
    /// and export. The terminal slice must equal the target bit for bit,
    /// which also invalidates caches across target changes.
    pub fn solve_or_load(
        &self,
        exp: &Experiment,
        gamma: f64,
    ) -> Result<(Arc<ValueFunction>, PathBuf), RunError> {
        let path = self.vf_path(gamma);
        if path.exists() {
            if let Ok(vf) = import_value_function(&path) {
                let matches = vf.grid().spec() == self.grid.spec()
                    && vf.gamma() == gamma
                    && vf.model_name() == self.model.name()
                    && vf.horizon() == exp.horizon
                    && vf
                        .slice(0)
                        .values()
                        .iter()
                        .zip(self.target.values())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                if matches {
                    return Ok((Arc::new(vf), path));
                }
            }
        }
        let cfg = self.solve_config(exp, gamma);
        let vf = solve_cbvf(&self.model, &self.target, &cfg).map_err(|source| RunError::Solve {
            context: format!("gamma = {gamma}"),
            source,
        })?;
        export_value_function(&vf, &path)?;
        Ok((Arc::new(vf), path))
    }

    /// Load or compute the stationary (infinite-horizon) value.
    pub fn stationary_or_load(
        &self,
        exp: &Experiment,
    ) -> Result<(ScalarField, PathBuf), RunError> {
        let path = self.stationary_file();
        if path.exists() {
            if let Ok(vf) = import_value_function(&path) {
                if vf.grid().spec() == self.grid.spec()
                    && vf.model_name() == self.model.name()
                    && vf.times() == [0.0]
                {
                    return Ok((vf.slice(0).clone(), path));
                }
            }
        }
        let mut cfg = self.solve_config(exp, 0.0);
        // The stationary march only needs the fixed point; first-order
        // stepping reaches it three times cheaper.
        cfg.time_scheme = TimeScheme::Euler;
        let field =
            solve_stationary(&self.model, &self.target, &cfg).map_err(|source| RunError::Solve {
                context: "stationary".into(),
                source,
            })?;
        let vf = stationary_value_function(&field, self.model.name())?;
        export_value_function(&vf, &path)?;
        Ok((field, path))
    }

    pub fn reference_policy(&self, exp: &Experiment) -> Result<Policy, RunError> {
        Ok(match &exp.reference {
            ReferenceSpec::Pd { kp, kd } => {
                pd_position_reference(&self.model, *kp, *kd, exp.goal[0])?
            }
            ReferenceSpec::Heading { gain } => {
                heading_reference(&self.model, *gain, [exp.goal[0], exp.goal[1]])?
            }
            ReferenceSpec::Zero => {
                constant_reference(&self.model, vec![0.0; self.model.control_dim()])?
            }
            ReferenceSpec::Constant(u) => constant_reference(&self.model, u.clone())?,
        })
    }

    pub fn build_policy(
        &self,
        exp: &Experiment,
        kind: PolicyKind,
        vf: &Arc<ValueFunction>,
        gamma: f64,
        v_inf: Option<&ScalarField>,
    ) -> Result<Policy, RunError> {
        let reference = self.reference_policy(exp)?;
        Ok(match kind {
            PolicyKind::Reference => reference,
            PolicyKind::Optimal => optimal_safe_policy(vf.clone(), self.model.clone())?,
            PolicyKind::LeastRestrictive => {
                let eps = exp.epsilon.unwrap_or_else(|| default_switch_margin(vf));
                least_restrictive_policy(vf.clone(), self.model.clone(), reference, eps)?
            }
            PolicyKind::CbvfQp => cbvf_qp_policy(vf.clone(), self.model.clone(), gamma, reference)?,
            PolicyKind::CbfQp => {
                let field = v_inf.expect("stationary value prepared for cbf_qp");
                cbf_qp_policy(field.clone(), self.model.clone(), gamma, reference)
            }
        })
    }

    pub fn disturbance(
        &self,
        exp: &Experiment,
        vf: &Arc<ValueFunction>,
    ) -> Result<DisturbanceStrategy, RunError> {
        Ok(match &exp.disturbance {
            DisturbanceSpec::Zero => DisturbanceStrategy::Zero,
            DisturbanceSpec::Constant(d) => DisturbanceStrategy::constant(&self.model, d.clone())
                .map_err(|source| RunError::Sim {
                    context: "constant disturbance".into(),
                    source,
                })?,
            DisturbanceSpec::WorstCase => worst_case_disturbance(vf.clone(), &self.model)
                .map_err(|source| RunError::Sim {
                    context: "worst-case disturbance".into(),
                    source,
                })?,
        })
    }
}

/// A contour of a (possibly time- and heading-sliced) stored value function.
pub fn level_set_of(
    vf: &ValueFunction,
    t: f64,
    slice_axis: Option<(usize, f64)>,
    level: f64,
) -> Result<Vec<LevelSetPolyline>, RunError> {
    let (a, b, w) = match vf.times().len() {
        1 => (0usize, 0usize, 1.0),
        _ => {
            // Blend the two bracketing slices at t.
            let mut lo = 0usize;
            let mut hi = vf.times().len() - 1;
            let t = t.clamp(vf.horizon(), vf.times()[0]);
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if vf.times()[mid] >= t {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let span = vf.times()[lo] - vf.times()[hi];
            (lo, hi, ((t - vf.times()[hi]) / span).clamp(0.0, 1.0))
        }
    };
    let blended = if a == b {
        vf.slice(a).clone()
    } else {
        let values: Vec<f64> = vf
            .slice(a)
            .values()
            .iter()
            .zip(vf.slice(b).values())
            .map(|(&va, &vb)| w * va + (1.0 - w) * vb)
            .collect();
        ScalarField::new(vf.grid().clone(), values)?
    };
    let plane = match slice_axis {
        Some((dim, value)) => blended.slice_at(dim, value)?,
        None => blended,
    };
    Ok(extract_level_set(&plane, level)?)
}

fn run_identifier(gamma: f64, kind: PolicyKind, disturbance: &str, x_index: usize) -> String {
    format!(
        "g{}_{}_{}_x{}",
        gamma_tag(gamma),
        kind.name(),
        disturbance,
        x_index
    )
}

/// Executes an experiment: solves (or loads cached) value functions, rolls
/// out every configured controller from every start state, and writes value
/// functions, trajectory CSVs, level-set CSVs, a metrics summary, and
/// (optionally) SVG plots into the output directory.
pub fn run_experiment(exp: &Experiment, opts: &RunOptions) -> Result<RunSummary, RunError> {
    let bench = Workbench::from_experiment(exp)?;
    std::fs::create_dir_all(&bench.out_dir).map_err(io_err(&bench.out_dir))?;

    let needs_stationary = exp.controllers.contains(&PolicyKind::CbfQp);
    let mut summary = RunSummary {
        out_dir: bench.out_dir.clone(),
        records: Vec::new(),
        value_function_paths: Vec::new(),
        stationary_path: None,
        metrics_path: None,
        plot_paths: Vec::new(),
    };

    let v_inf = if needs_stationary && !opts.solve_only {
        let (field, path) = bench.stationary_or_load(exp)?;
        summary.stationary_path = Some(path);
        Some(field)
    } else if needs_stationary {
        let (_, path) = bench.stationary_or_load(exp)?;
        summary.stationary_path = Some(path);
        None
    } else {
        None
    };

    let mut solves: Vec<(f64, Arc<ValueFunction>)> = Vec::new();
    for &gamma in &exp.gammas {
        let (vf, path) = bench.solve_or_load(exp, gamma)?;
        summary.value_function_paths.push((gamma, path));
        solves.push((gamma, vf));
    }
    if opts.solve_only {
        return Ok(summary);
    }

    let dt_sim = exp.dt_sim.unwrap_or_else(|| bench.solver_dt.min(0.01));
    let t0 = exp.t0.unwrap_or(exp.horizon);

    // Level sets and plots only make sense from two dimensions up; 1D runs
    // still produce trajectories and metrics.
    let can_contour = bench.grid.ndim() >= 2;

    // Target zero level set (sliced at the first start's heading for 3D).
    if can_contour {
        let target_contour_path = bench.out_dir.join("levelset_target.csv");
        let plane = if bench.grid.ndim() == 2 {
            bench.target.clone()
        } else {
            bench
                .target
                .slice_at(2, exp.x0s.first().map(|x| x[2]).unwrap_or(0.0))?
        };
        let lines = extract_level_set(&plane, 0.0)?;
        write_level_set_csv(&lines, &target_contour_path)?;
    }

    for (gamma, vf) in &solves {
        let gamma = *gamma;
        // Zero level set of the value at the rollout start time.
        let safe_lines = if can_contour {
            let slice_axis = if bench.grid.ndim() == 2 {
                None
            } else {
                Some((2usize, exp.x0s.first().map(|x| x[2]).unwrap_or(0.0)))
            };
            let lines = level_set_of(vf, t0, slice_axis, 0.0)?;
            write_level_set_csv(
                &lines,
                &bench
                    .out_dir
                    .join(format!("levelset_b_g{}.csv", gamma_tag(gamma))),
            )?;
            lines
        } else {
            Vec::new()
        };

        let strategy = bench.disturbance(exp, vf)?;
        let render_plots = opts.render_plots && can_contour;
        let mut plot_layers: Vec<PlotLayer> = Vec::new();
        if render_plots {
            plot_layers.push(PlotLayer::Axes(AxisSpec {
                x_range: [bench.grid.lo()[0], bench.grid.hi()[0]],
                y_range: [bench.grid.lo()[1], bench.grid.hi()[1]],
                x_label: "state 0".into(),
                y_label: "state 1".into(),
                title: format!("gamma = {gamma}, t0 = {t0}"),
            }));
            let target_lines = if bench.grid.ndim() == 2 {
                extract_level_set(&bench.target, 0.0)?
            } else {
                extract_level_set(
                    &bench
                        .target
                        .slice_at(2, exp.x0s.first().map(|x| x[2]).unwrap_or(0.0))?,
                    0.0,
                )?
            };
            plot_layers.push(PlotLayer::Polylines {
                name: "target boundary".into(),
                pieces: target_lines,
                color: "#2ca02c".into(),
                dashed: false,
            });
            plot_layers.push(PlotLayer::Polylines {
                name: format!("safe set at t0 (g={gamma})"),
                pieces: safe_lines.clone(),
                color: "#ff7f0e".into(),
                dashed: true,
            });
            plot_layers.push(PlotLayer::Points {
                name: "goal".into(),
                points: vec![[exp.goal[0], *exp.goal.get(1).unwrap_or(&0.0)]],
                color: "#2ca02c".into(),
            });
        }
        let palette = ["#1f77b4", "#d62728", "#9467bd", "#17becf", "#8c564b"];

        for (xi, x0) in exp.x0s.iter().enumerate() {
            for (ci, &kind) in exp.controllers.iter().enumerate() {
                let policy = bench.build_policy(exp, kind, vf, gamma, v_inf.as_ref())?;
                let context =
                    format!("gamma {gamma}, controller {}, x0 {:?}", kind.name(), x0);
                let traj = simulate(
                    &bench.model,
                    &policy,
                    &strategy,
                    vf,
                    &bench.target,
                    x0,
                    t0,
                    dt_sim,
                )
                .map_err(|source| RunError::Sim {
                    context: context.clone(),
                    source,
                })?;
                let metrics = trajectory_metrics(
                    &traj,
                    &exp.goal,
                    exp.goal_radius,
                    &bench.grid,
                    policy.relaxation_count(),
                )
                .map_err(|source| RunError::Sim {
                    context,
                    source,
                })?;
                let id = run_identifier(gamma, kind, strategy.name(), xi);
                let traj_path = bench.out_dir.join(format!("traj_{id}.csv"));
                write_trajectory_csv(&traj, &traj_path)?;
                if render_plots {
                    let pts: Vec<[f64; 2]> =
                        traj.samples.iter().map(|s| [s.x[0], s.x[1]]).collect();
                    plot_layers.push(PlotLayer::Trajectory {
                        name: format!("{} x{}", kind.name(), xi),
                        points: pts,
                        color: palette[(ci + xi * exp.controllers.len()) % palette.len()]
                            .to_string(),
                    });
                    plot_layers.push(PlotLayer::Points {
                        name: format!("start x{xi}"),
                        points: vec![[x0[0], x0[1]]],
                        color: "#d62728".into(),
                    });
                }
                summary.records.push(RunRecord {
                    gamma,
                    controller: kind,
                    disturbance: strategy.name().to_string(),
                    x0: x0.clone(),
                    metrics,
                    trajectory_path: traj_path,
                });
            }
        }
        if render_plots {
            let svg_text = render_plot_svg(&plot_layers)?;
            let path = bench.out_dir.join(format!("plot_g{}.svg", gamma_tag(gamma)));
            std::fs::write(&path, svg_text).map_err(io_err(&path))?;
            summary.plot_paths.push(path);
        }
    }

    let metrics_path = bench.out_dir.join("metrics.txt");
    std::fs::write(&metrics_path, summary.metrics_table(exp)).map_err(io_err(&metrics_path))?;
    summary.metrics_path = Some(metrics_path);
    Ok(summary)
}

impl RunSummary {
    /// Human-readable (and machine-parsable) metrics table.
    pub fn metrics_table(&self, exp: &Experiment) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# scene: toolkit default reconstruction; geometry and gains are \
             this artifact's choices"
        );
        let _ = writeln!(out, "# model = {}", exp.model.name());
        let _ = writeln!(
            out,
            "gamma\tcontroller\tdisturbance\tx0\tmin_l\tmin_B\ttarget_reached\tcontrol_effort\trelaxations\texited_domain"
        );
        for r in &self.records {
            let x0: Vec<String> = r.x0.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t[{}]\t{}\t{}\t{}\t{}\t{}\t{}",
                r.gamma,
                r.controller.name(),
                r.disturbance,
                x0.join(", "),
                r.metrics.min_target,
                r.metrics.min_barrier,
                r.metrics.target_reached,
                r.metrics.control_effort,
                r.metrics.relaxation_count,
                r.metrics.exited_domain,
            );
        }
        out
    }
}

/// Rolls one trajectory outside the full pipeline (used by examples/tests).
#[allow(clippy::too_many_arguments)]
pub fn roll_single(
    bench: &Workbench,
    exp: &Experiment,
    vf: &Arc<ValueFunction>,
    kind: PolicyKind,
    gamma: f64,
    v_inf: Option<&ScalarField>,
    x0: &[f64],
) -> Result<(Trajectory, Metrics), RunError> {
    let policy = bench.build_policy(exp, kind, vf, gamma, v_inf)?;
    let strategy = bench.disturbance(exp, vf)?;
    let dt_sim = exp.dt_sim.unwrap_or_else(|| bench.solver_dt.min(0.01));
    let t0 = exp.t0.unwrap_or(exp.horizon);
    let traj = simulate(
        &bench.model,
        &policy,
        &strategy,
        vf,
        &bench.target,
        x0,
        t0,
        dt_sim,
    )
    .map_err(|source| RunError::Sim {
        context: format!("controller {}", kind.name()),
        source,
    })?;
    let metrics = trajectory_metrics(
        &traj,
        &exp.goal,
        exp.goal_radius,
        &bench.grid,
        policy.relaxation_count(),
    )
    .map_err(|source| RunError::Sim {
        context: format!("controller {}", kind.name()),
        source,
    })?;
    Ok((traj, metrics))
}
