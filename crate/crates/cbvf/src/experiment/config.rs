//! Line-oriented experiment configs.
//!
//! Grammar: one `key = value` per line, `#` starts a comment, lists are
//! comma-separated, vectors bracketed (`[a, b]`). Unknown keys are errors.
//! Repeated `x0 = [...]` lines accumulate start states. Defaults are
//! model-scene defaults; see `default_experiment` and the shipped configs.

use std::fmt;
use std::path::PathBuf;

use crate::control::PolicyKind;
use crate::experiment::shapes::TargetShape;
use crate::grid::GridSpec;
use crate::model::{ControlAffineModel, ModelError};
use crate::solver::TimeScheme;

#[derive(Debug, Clone)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self {
            line: Some(line),
            message: message.into(),
        }
    }

    fn global(message: impl Into<String>) -> Self {
        Self {
            line: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "config line {line}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Which benchmark system to build, with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    DoubleIntegrator,
    DubinsCar { speed: f64 },
    SingleIntegrator1d { u_max: f64, d_max: f64 },
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::DoubleIntegrator => "double_integrator",
            ModelSpec::DubinsCar { .. } => "dubins_car",
            ModelSpec::SingleIntegrator1d { .. } => "single_integrator_1d",
        }
    }

    pub fn build(&self) -> Result<ControlAffineModel, ModelError> {
        match *self {
            ModelSpec::DoubleIntegrator => Ok(ControlAffineModel::double_integrator()),
            ModelSpec::DubinsCar { speed } => ControlAffineModel::dubins_car(speed),
            ModelSpec::SingleIntegrator1d { u_max, d_max } => {
                ControlAffineModel::single_integrator_1d(u_max, d_max)
            }
        }
    }
}

/// Reference controller selection.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceSpec {
    Pd { kp: f64, kd: f64 },
    Heading { gain: f64 },
    Zero,
    Constant(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceSpec {
    Zero,
    Constant(Vec<f64>),
    WorstCase,
}

impl DisturbanceSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DisturbanceSpec::Zero => "zero",
            DisturbanceSpec::Constant(_) => "constant",
            DisturbanceSpec::WorstCase => "worst_case",
        }
    }
}

/// A fully resolved experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub target: TargetShape,
    pub gammas: Vec<f64>,
    pub horizon: f64,
    pub cfl: f64,
    pub scheme: TimeScheme,
    pub store_stride: Option<usize>,
    pub stationary_tol: f64,
    pub max_steps: usize,
    pub controllers: Vec<PolicyKind>,
    pub reference: ReferenceSpec,
    pub goal: Vec<f64>,
    pub goal_radius: f64,
    /// Least-restrictive switching margin; `None` = derived from the value
    /// function's slope and cell size.
    pub epsilon: Option<f64>,
    pub x0s: Vec<Vec<f64>>,
    /// Simulation start time; `None` = the horizon.
    pub t0: Option<f64>,
    /// Simulation step; `None` = min(0.01, solver step).
    pub dt_sim: Option<f64>,
    pub disturbance: DisturbanceSpec,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Scene defaults per model.
pub fn default_experiment(model: ModelSpec) -> Experiment {
    match model {
        ModelSpec::DoubleIntegrator => Experiment {
            model,
            grid: GridSpec::rectangular(vec![-1.0, -2.0], vec![5.0, 2.0], vec![161, 161]),
            target: TargetShape::bounding_box(vec![-1.0, -2.0], vec![5.0, 2.0]),
            gammas: vec![0.0],
            horizon: -5.0,
            cfl: 0.5,
            scheme: TimeScheme::TvdRk3,
            store_stride: None,
            stationary_tol: 1e-3,
            max_steps: 200_000,
            controllers: vec![PolicyKind::CbvfQp],
            reference: ReferenceSpec::Pd { kp: 1.0, kd: 1.5 },
            goal: vec![-0.5, 0.0],
            goal_radius: 0.3,
            epsilon: None,
            x0s: vec![vec![3.0, -1.0]],
            t0: None,
            dt_sim: None,
            disturbance: DisturbanceSpec::Zero,
            seed: 0,
            out_dir: PathBuf::from("out"),
        },
        ModelSpec::DubinsCar { .. } => Experiment {
            model,
            grid: GridSpec::new(
                vec![-4.0, -4.0, 0.0],
                vec![4.0, 4.0, 2.0 * std::f64::consts::PI],
                vec![81, 81, 60],
                vec![false, false, true],
            ),
            target: TargetShape::disk_obstacle(vec![0.0, 0.0], 1.0),
            gammas: vec![10.0],
            horizon: -4.0,
            cfl: 0.5,
            scheme: TimeScheme::TvdRk3,
            store_stride: None,
            stationary_tol: 1e-3,
            max_steps: 200_000,
            controllers: vec![PolicyKind::CbvfQp],
            reference: ReferenceSpec::Heading { gain: 4.0 },
            goal: vec![3.0, 0.0],
            goal_radius: 0.3,
            epsilon: None,
            x0s: vec![vec![-2.5, 0.0, 0.0]],
            t0: None,
            dt_sim: None,
            disturbance: DisturbanceSpec::Zero,
            seed: 0,
            out_dir: PathBuf::from("out"),
        },
        ModelSpec::SingleIntegrator1d { .. } => Experiment {
            model,
            grid: GridSpec::rectangular(vec![-2.0], vec![2.0], vec![201]),
            target: TargetShape::bounding_box(vec![-1.0], vec![1.0]),
            gammas: vec![0.5],
            horizon: -2.0,
            cfl: 0.5,
            scheme: TimeScheme::TvdRk3,
            store_stride: None,
            stationary_tol: 1e-3,
            max_steps: 200_000,
            controllers: vec![PolicyKind::CbvfQp],
            reference: ReferenceSpec::Zero,
            goal: vec![0.0],
            goal_radius: 0.1,
            epsilon: None,
            x0s: vec![vec![0.5]],
            t0: None,
            dt_sim: None,
            disturbance: DisturbanceSpec::Zero,
            seed: 0,
            out_dir: PathBuf::from("out"),
        },
    }
}

const KNOWN_KEYS: &[&str] = &[
    "model",
    "speed",
    "u_max",
    "d_max",
    "grid_lo",
    "grid_hi",
    "grid_n",
    "grid_periodic",
    "target",
    "gamma",
    "horizon",
    "cfl",
    "scheme",
    "store_stride",
    "stationary_tol",
    "max_steps",
    "controllers",
    "reference",
    "ref_kp",
    "ref_kd",
    "ref_gain",
    "ref_constant",
    "goal",
    "goal_radius",
    "epsilon",
    "x0",
    "t0",
    "dt_sim",
    "disturbance",
    "disturbance_vector",
    "seed",
    "out_dir",
];

struct Entry {
    line: usize,
    key: String,
    value: String,
}

fn tokenize(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        let eq = content.find('=').ok_or_else(|| {
            ConfigError::at(line, format!("expected 'key = value', got '{content}'"))
        })?;
        let key = content[..eq].trim().to_string();
        let value = content[eq + 1..].trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::at(line, "missing key before '='"));
        }
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::at(line, format!("unknown key '{key}'")));
        }
        if value.is_empty() {
            return Err(ConfigError::at(line, format!("key '{key}' has no value")));
        }
        entries.push(Entry { line, key, value });
    }
    Ok(entries)
}

fn parse_f64(line: usize, s: &str) -> Result<f64, ConfigError> {
    s.trim()
        .parse()
        .map_err(|_| ConfigError::at(line, format!("expected a number, got '{s}'")))
}

fn parse_usize(line: usize, s: &str) -> Result<usize, ConfigError> {
    s.trim()
        .parse()
        .map_err(|_| ConfigError::at(line, format!("expected a non-negative integer, got '{s}'")))
}

fn parse_bool(line: usize, s: &str) -> Result<bool, ConfigError> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(ConfigError::at(
            line,
            format!("expected 'true' or 'false', got '{other}'"),
        )),
    }
}

/// Splits on top-level commas (commas inside brackets or parentheses stay).
fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' | '(' => depth += 1,
            ']' | ')' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(s[start..].trim());
    parts
}

fn parse_vector(line: usize, s: &str) -> Result<Vec<f64>, ConfigError> {
    let s = s.trim();
    let inner = s
        .strip_prefix('[')
        .and_then(|rest| rest.strip_suffix(']'))
        .ok_or_else(|| ConfigError::at(line, format!("expected a bracketed vector, got '{s}'")))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|p| parse_f64(line, p)).collect()
}

fn parse_bool_vector(line: usize, s: &str) -> Result<Vec<bool>, ConfigError> {
    let s = s.trim();
    let inner = s
        .strip_prefix('[')
        .and_then(|rest| rest.strip_suffix(']'))
        .ok_or_else(|| ConfigError::at(line, format!("expected a bracketed vector, got '{s}'")))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|p| parse_bool(line, p)).collect()
}

fn parse_usize_vector(line: usize, s: &str) -> Result<Vec<usize>, ConfigError> {
    let s = s.trim();
    let inner = s
        .strip_prefix('[')
        .and_then(|rest| rest.strip_suffix(']'))
        .ok_or_else(|| ConfigError::at(line, format!("expected a bracketed vector, got '{s}'")))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|p| parse_usize(line, p)).collect()
}

fn parse_f64_list(line: usize, s: &str) -> Result<Vec<f64>, ConfigError> {
    split_top_level(s).iter().map(|p| parse_f64(line, p)).collect()
}

fn parse_shape(line: usize, s: &str) -> Result<TargetShape, ConfigError> {
    let s = s.trim();
    let open = s.find('(').ok_or_else(|| {
        ConfigError::at(line, format!("expected shape call like box(...), got '{s}'"))
    })?;
    if !s.ends_with(')') {
        return Err(ConfigError::at(line, format!("unbalanced shape call '{s}'")));
    }
    let name = s[..open].trim();
    let args_str = &s[open + 1..s.len() - 1];
    let args = split_top_level(args_str);
    match name {
        "box" => {
            if args.len() != 2 && args.len() != 3 {
                return Err(ConfigError::at(
                    line,
                    "box(lo_vector, hi_vector[, dims]) takes 2 or 3 arguments",
                ));
            }
            let lo = parse_vector(line, args[0])?;
            let hi = parse_vector(line, args[1])?;
            let dims = if args.len() == 3 {
                parse_usize_vector(line, args[2])?
            } else {
                Vec::new()
            };
            if lo.len() != hi.len() {
                return Err(ConfigError::at(line, "box lo and hi lengths differ"));
            }
            Ok(TargetShape::Box { lo, hi, dims })
        }
        "circle_complement" => {
            if args.len() != 2 && args.len() != 3 {
                return Err(ConfigError::at(
                    line,
                    "circle_complement(center_vector, radius[, dims]) takes 2 or 3 arguments",
                ));
            }
            let center = parse_vector(line, args[0])?;
            let radius = parse_f64(line, args[1])?;
            let dims = if args.len() == 3 {
                parse_usize_vector(line, args[2])?
            } else {
                Vec::new()
            };
            if !(radius > 0.0) {
                return Err(ConfigError::at(line, "circle_complement radius must be > 0"));
            }
            Ok(TargetShape::CircleComplement {
                center,
                radius,
                dims,
            })
        }
        "min_of" => {
            if args.is_empty() || (args.len() == 1 && args[0].is_empty()) {
                return Err(ConfigError::at(line, "min_of needs at least one shape"));
            }
            let shapes = args
                .iter()
                .map(|a| parse_shape(line, a))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(TargetShape::MinOf(shapes))
        }
        other => Err(ConfigError::at(
            line,
            format!("unknown shape '{other}' (box, circle_complement, min_of)"),
        )),
    }
}

fn parse_controller(line: usize, s: &str) -> Result<PolicyKind, ConfigError> {
    Ok(match s.trim() {
        "cbvf_qp" => PolicyKind::CbvfQp,
        "cbf_qp" => PolicyKind::CbfQp,
        "optimal" => PolicyKind::Optimal,
        "least_restrictive" => PolicyKind::LeastRestrictive,
        "reference" => PolicyKind::Reference,
        other => {
            return Err(ConfigError::at(
                line,
                format!(
                    "unknown controller '{other}' \
                     (cbvf_qp, cbf_qp, optimal, least_restrictive, reference)"
                ),
            ))
        }
    })
}

/// Parses an experiment config from text.
pub fn parse_experiment_config(text: &str) -> Result<Experiment, ConfigError> {
    let entries = tokenize(text)?;
    let model_entry = entries
        .iter()
        .find(|e| e.key == "model")
        .ok_or_else(|| ConfigError::global("required key 'model' missing"))?;
    let model_name = model_entry.value.clone();
    let mut speed: Option<(usize, f64)> = None;
    let mut u_max: Option<(usize, f64)> = None;
    let mut d_max: Option<(usize, f64)> = None;
    for e in &entries {
        match e.key.as_str() {
            "speed" => speed = Some((e.line, parse_f64(e.line, &e.value)?)),
            "u_max" => u_max = Some((e.line, parse_f64(e.line, &e.value)?)),
            "d_max" => d_max = Some((e.line, parse_f64(e.line, &e.value)?)),
            _ => {}
        }
    }
    let model = match model_name.as_str() {
        "double_integrator" => {
            for (what, v) in [("speed", &speed), ("u_max", &u_max), ("d_max", &d_max)] {
                if let Some((line, _)) = v {
                    return Err(ConfigError::at(
                        *line,
                        format!("key '{what}' does not apply to double_integrator"),
                    ));
                }
            }
            ModelSpec::DoubleIntegrator
        }
        "dubins_car" => {
            for (what, v) in [("u_max", &u_max), ("d_max", &d_max)] {
                if let Some((line, _)) = v {
                    return Err(ConfigError::at(
                        *line,
                        format!("key '{what}' does not apply to dubins_car"),
                    ));
                }
            }
            ModelSpec::DubinsCar {
                speed: speed.map(|(_, v)| v).unwrap_or(1.0),
            }
        }
        "single_integrator_1d" => {
            if let Some((line, _)) = speed {
                return Err(ConfigError::at(
                    line,
                    "key 'speed' does not apply to single_integrator_1d",
                ));
            }
            ModelSpec::SingleIntegrator1d {
                u_max: u_max.map(|(_, v)| v).unwrap_or(1.0),
                d_max: d_max.map(|(_, v)| v).unwrap_or(0.0),
            }
        }
        other => {
            return Err(ConfigError::at(
                model_entry.line,
                format!(
                    "unknown model '{other}' \
                     (double_integrator, dubins_car, single_integrator_1d)"
                ),
            ))
        }
    };

    let mut exp = default_experiment(model);
    let mut saw_x0 = false;
    let mut reference_kind: Option<(usize, String)> = None;
    let mut ref_kp: Option<f64> = None;
    let mut ref_kd: Option<f64> = None;
    let mut ref_gain: Option<f64> = None;
    let mut ref_constant: Option<Vec<f64>> = None;
    let mut disturbance_kind: Option<(usize, String)> = None;
    let mut disturbance_vector: Option<(usize, Vec<f64>)> = None;

    for e in &entries {
        let line = e.line;
        let v = e.value.as_str();
        match e.key.as_str() {
            "model" | "speed" | "u_max" | "d_max" => {}
            "grid_lo" => exp.grid.lo = parse_vector(line, v)?,
            "grid_hi" => exp.grid.hi = parse_vector(line, v)?,
            "grid_n" => exp.grid.n = parse_usize_vector(line, v)?,
            "grid_periodic" => exp.grid.periodic = parse_bool_vector(line, v)?,
            "target" => exp.target = parse_shape(line, v)?,
            "gamma" => {
                let gammas = parse_f64_list(line, v)?;
                for &g in &gammas {
                    if !(g >= 0.0) {
                        return Err(ConfigError::at(line, format!("gamma must be >= 0, got {g}")));
                    }
                }
                if gammas.is_empty() {
                    return Err(ConfigError::at(line, "gamma list must be non-empty"));
                }
                exp.gammas = gammas;
            }
            "horizon" => {
                let h = parse_f64(line, v)?;
                if !(h < 0.0) {
                    return Err(ConfigError::at(line, format!("horizon must be < 0, got {h}")));
                }
                exp.horizon = h;
            }
            "cfl" => {
                let c = parse_f64(line, v)?;
                if !(c > 0.0 && c <= 1.0) {
                    return Err(ConfigError::at(line, format!("cfl must lie in (0, 1], got {c}")));
                }
                exp.cfl = c;
            }
            "scheme" => {
                exp.scheme = match v {
                    "euler" => TimeScheme::Euler,
                    "tvd_rk3" => TimeScheme::TvdRk3,
                    other => {
                        return Err(ConfigError::at(
                            line,
                            format!("unknown scheme '{other}' (euler, tvd_rk3)"),
                        ))
                    }
                };
            }
            "store_stride" => {
                let s = parse_usize(line, v)?;
                if s == 0 {
                    return Err(ConfigError::at(line, "store_stride must be >= 1"));
                }
                exp.store_stride = Some(s);
            }
            "stationary_tol" => {
                let t = parse_f64(line, v)?;
                if !(t > 0.0) {
                    return Err(ConfigError::at(line, "stationary_tol must be > 0"));
                }
                exp.stationary_tol = t;
            }
            "max_steps" => {
                let s = parse_usize(line, v)?;
                if s == 0 {
                    return Err(ConfigError::at(line, "max_steps must be >= 1"));
                }
                exp.max_steps = s;
            }
            "controllers" => {
                exp.controllers = split_top_level(v)
                    .iter()
                    .map(|p| parse_controller(line, p))
                    .collect::<Result<_, _>>()?;
                if exp.controllers.is_empty() {
                    return Err(ConfigError::at(line, "controllers list must be non-empty"));
                }
            }
            "reference" => reference_kind = Some((line, v.to_string())),
            "ref_kp" => ref_kp = Some(parse_f64(line, v)?),
            "ref_kd" => ref_kd = Some(parse_f64(line, v)?),
            "ref_gain" => ref_gain = Some(parse_f64(line, v)?),
            "ref_constant" => ref_constant = Some(parse_vector(line, v)?),
            "goal" => exp.goal = parse_vector(line, v)?,
            "goal_radius" => {
                let r = parse_f64(line, v)?;
                if !(r > 0.0) {
                    return Err(ConfigError::at(line, "goal_radius must be > 0"));
                }
                exp.goal_radius = r;
            }
            "epsilon" => {
                let eps = parse_f64(line, v)?;
                if !(eps >= 0.0) {
                    return Err(ConfigError::at(line, "epsilon must be >= 0"));
                }
                exp.epsilon = Some(eps);
            }
            "x0" => {
                let x = parse_vector(line, v)?;
                if !saw_x0 {
                    exp.x0s.clear();
                    saw_x0 = true;
                }
                exp.x0s.push(x);
            }
            "t0" => exp.t0 = Some(parse_f64(line, v)?),
            "dt_sim" => {
                let d = parse_f64(line, v)?;
                if !(d > 0.0) {
                    return Err(ConfigError::at(line, "dt_sim must be > 0"));
                }
                exp.dt_sim = Some(d);
            }
            "disturbance" => disturbance_kind = Some((line, v.to_string())),
            "disturbance_vector" => {
                disturbance_vector = Some((line, parse_vector(line, v)?))
            }
            "seed" => {
                exp.seed = v.parse().map_err(|_| {
                    ConfigError::at(line, format!("expected an unsigned integer, got '{v}'"))
                })?;
            }
            "out_dir" => exp.out_dir = PathBuf::from(v),
            other => unreachable!("tokenizer admitted unknown key {other}"),
        }
    }

    // Resolve the reference controller.
    let default_reference = exp.reference.clone();
    exp.reference = match reference_kind {
        None => match default_reference {
            ReferenceSpec::Pd { kp, kd } => ReferenceSpec::Pd {
                kp: ref_kp.unwrap_or(kp),
                kd: ref_kd.unwrap_or(kd),
            },
            ReferenceSpec::Heading { gain } => ReferenceSpec::Heading {
                gain: ref_gain.unwrap_or(gain),
            },
            other => other,
        },
        Some((line, kind)) => match kind.as_str() {
            "pd" => ReferenceSpec::Pd {
                kp: ref_kp.unwrap_or(1.0),
                kd: ref_kd.unwrap_or(1.5),
            },
            "heading" => ReferenceSpec::Heading {
                gain: ref_gain.unwrap_or(4.0),
            },
            "zero" => ReferenceSpec::Zero,
            "constant" => ReferenceSpec::Constant(ref_constant.clone().ok_or_else(|| {
                ConfigError::at(line, "reference = constant needs ref_constant = [..]")
            })?),
            other => {
                return Err(ConfigError::at(
                    line,
                    format!("unknown reference '{other}' (pd, heading, zero, constant)"),
                ))
            }
        },
    };

    // Resolve the disturbance strategy.
    exp.disturbance = match disturbance_kind {
        None => exp.disturbance,
        Some((line, kind)) => match kind.as_str() {
            "zero" => DisturbanceSpec::Zero,
            "worst_case" => DisturbanceSpec::WorstCase,
            "constant" => {
                let (_, v) = disturbance_vector.clone().ok_or_else(|| {
                    ConfigError::at(line, "disturbance = constant needs disturbance_vector = [..]")
                })?;
                DisturbanceSpec::Constant(v)
            }
            other => {
                return Err(ConfigError::at(
                    line,
                    format!("unknown disturbance '{other}' (zero, constant, worst_case)"),
                ))
            }
        },
    };

    validate_experiment(&exp)?;
    Ok(exp)
}

fn validate_experiment(exp: &Experiment) -> Result<(), ConfigError> {
    let ndim = exp.grid.lo.len();
    if exp.grid.hi.len() != ndim || exp.grid.n.len() != ndim || exp.grid.periodic.len() != ndim {
        return Err(ConfigError::global(format!(
            "grid field lengths disagree: lo {}, hi {}, n {}, periodic {}",
            exp.grid.lo.len(),
            exp.grid.hi.len(),
            exp.grid.n.len(),
            exp.grid.periodic.len()
        )));
    }
    let model = exp
        .model
        .build()
        .map_err(|e| ConfigError::global(format!("model parameters invalid: {e}")))?;
    if model.state_dim() != ndim {
        return Err(ConfigError::global(format!(
            "model '{}' has {} states but the grid has {} dimensions",
            model.name(),
            model.state_dim(),
            ndim
        )));
    }
    for x0 in &exp.x0s {
        if x0.len() != ndim {
            return Err(ConfigError::global(format!(
                "x0 {:?} has {} coordinates, expected {}",
                x0,
                x0.len(),
                ndim
            )));
        }
    }
    if exp.goal.is_empty() || exp.goal.len() > ndim {
        return Err(ConfigError::global(format!(
            "goal needs between 1 and {ndim} coordinates"
        )));
    }
    if let Some(t0) = exp.t0 {
        if !(t0 >= exp.horizon && t0 <= 0.0) {
            return Err(ConfigError::global(format!(
                "t0 = {t0} outside [{}, 0]",
                exp.horizon
            )));
        }
    }
    match (&exp.reference, &exp.model) {
        (ReferenceSpec::Pd { .. }, ModelSpec::DoubleIntegrator) => {}
        (ReferenceSpec::Pd { .. }, other) => {
            return Err(ConfigError::global(format!(
                "reference = pd needs a position/velocity model, not {}",
                other.name()
            )))
        }
        (ReferenceSpec::Heading { .. }, ModelSpec::DubinsCar { .. }) => {}
        (ReferenceSpec::Heading { .. }, other) => {
            return Err(ConfigError::global(format!(
                "reference = heading needs a planar heading model, not {}",
                other.name()
            )))
        }
        _ => {}
    }
    Ok(())
}

fn fmt_vec(v: &[f64]) -> String {
    let inner: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", inner.join(", "))
}

/// Serializes an experiment back into the config grammar; reparsing yields
/// an equivalent experiment.
pub fn experiment_to_config(exp: &Experiment) -> String {
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(format!("model = {}", exp.model.name()));
    match exp.model {
        ModelSpec::DubinsCar { speed } => line(format!("speed = {speed}")),
        ModelSpec::SingleIntegrator1d { u_max, d_max } => {
            line(format!("u_max = {u_max}"));
            line(format!("d_max = {d_max}"));
        }
        ModelSpec::DoubleIntegrator => {}
    }
    line(format!("grid_lo = {}", fmt_vec(&exp.grid.lo)));
    line(format!("grid_hi = {}", fmt_vec(&exp.grid.hi)));
    line(format!(
        "grid_n = [{}]",
        exp.grid
            .n
            .iter()
            .map(|n| n.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    line(format!(
        "grid_periodic = [{}]",
        exp.grid
            .periodic
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    line(format!("target = {}", exp.target));
    line(format!(
        "gamma = {}",
        exp.gammas
            .iter()
            .map(|g| g.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    line(format!("horizon = {}", exp.horizon));
    line(format!("cfl = {}", exp.cfl));
    line(format!("scheme = {}", exp.scheme.name()));
    if let Some(s) = exp.store_stride {
        line(format!("store_stride = {s}"));
    }
    line(format!("stationary_tol = {}", exp.stationary_tol));
    line(format!("max_steps = {}", exp.max_steps));
    line(format!(
        "controllers = {}",
        exp.controllers
            .iter()
            .map(|c| c.name().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    match &exp.reference {
        ReferenceSpec::Pd { kp, kd } => {
            line("reference = pd".into());
            line(format!("ref_kp = {kp}"));
            line(format!("ref_kd = {kd}"));
        }
        ReferenceSpec::Heading { gain } => {
            line("reference = heading".into());
            line(format!("ref_gain = {gain}"));
        }
        ReferenceSpec::Zero => line("reference = zero".into()),
        ReferenceSpec::Constant(v) => {
            line("reference = constant".into());
            line(format!("ref_constant = {}", fmt_vec(v)));
        }
    }
    line(format!("goal = {}", fmt_vec(&exp.goal)));
    line(format!("goal_radius = {}", exp.goal_radius));
    if let Some(eps) = exp.epsilon {
        line(format!("epsilon = {eps}"));
    }
    for x0 in &exp.x0s {
        line(format!("x0 = {}", fmt_vec(x0)));
    }
    if let Some(t0) = exp.t0 {
        line(format!("t0 = {t0}"));
    }
    if let Some(dt) = exp.dt_sim {
        line(format!("dt_sim = {dt}"));
    }
    line(format!("disturbance = {}", exp.disturbance.name()));
    if let DisturbanceSpec::Constant(v) = &exp.disturbance {
        line(format!("disturbance_vector = {}", fmt_vec(v)));
    }
    line(format!("seed = {}", exp.seed));
    line(format!("out_dir = {}", exp.out_dir.display()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_with_gamma_sweep() {
        let exp = parse_experiment_config("model = double_integrator\ngamma = 0, 0.2, 0.5\nhorizon = -5\n").unwrap();
        assert_eq!(exp.gammas, vec![0.0, 0.2, 0.5]);
        assert_eq!(exp.horizon, -5.0);
        assert_eq!(exp.grid.n, vec![161, 161]);
        assert_eq!(exp.model, ModelSpec::DoubleIntegrator);
        assert_eq!(exp.reference, ReferenceSpec::Pd { kp: 1.0, kd: 1.5 });
    }

    #[test]
    fn empty_input_missing_model() {
        let err = parse_experiment_config("").unwrap_err();
        assert!(err.message.contains("'model' missing"), "{err}");
    }

    #[test]
    fn negative_gamma_rejected_with_line() {
        let err =
            parse_experiment_config("model = double_integrator\ngamma = -1\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        assert!(err.message.contains("gamma must be >= 0"), "{err}");
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = parse_experiment_config("model = double_integrator\nwarp = 9\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        assert!(err.message.contains("unknown key 'warp'"), "{err}");
    }

    #[test]
    fn unknown_controller_rejected() {
        let err = parse_experiment_config(
            "model = double_integrator\ncontrollers = cbvf_qp, fancy\n",
        )
        .unwrap_err();
        assert!(err.message.contains("unknown controller 'fancy'"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "\n# scene\nmodel = double_integrator  # the benchmark\n\ngamma = 0.2\n";
        let exp = parse_experiment_config(text).unwrap();
        assert_eq!(exp.gammas, vec![0.2]);
    }

    #[test]
    fn repeated_x0_lines_accumulate() {
        let text = "model = double_integrator\nx0 = [3, -1]\nx0 = [4, 1.5]\n";
        let exp = parse_experiment_config(text).unwrap();
        assert_eq!(exp.x0s, vec![vec![3.0, -1.0], vec![4.0, 1.5]]);
    }

    #[test]
    fn shape_expressions_parse() {
        let text = "model = dubins_car\ntarget = min_of(box([-4, -4], [4, 4], [0, 1]), circle_complement([0, 0], 1, [0, 1]))\n";
        let exp = parse_experiment_config(text).unwrap();
        match &exp.target {
            TargetShape::MinOf(shapes) => {
                assert_eq!(shapes.len(), 2);
                assert!(matches!(shapes[0], TargetShape::Box { .. }));
                assert!(matches!(shapes[1], TargetShape::CircleComplement { .. }));
            }
            other => panic!("unexpected shape {other:?}"),
        }
    }

    #[test]
    fn wrong_model_parameter_flagged() {
        let err =
            parse_experiment_config("model = double_integrator\nspeed = 2\n").unwrap_err();
        assert!(err.message.contains("does not apply"), "{err}");
    }

    #[test]
    fn round_trip_equivalence() {
        let text = "model = dubins_car\nspeed = 2\ngamma = 10\nhorizon = -4\n\
                    controllers = cbvf_qp, cbf_qp\nreference = heading\nref_gain = 5\n\
                    goal = [3.45, 0]\ngoal_radius = 0.3\nx0 = [0, -2.6, 0.6]\nt0 = -2.6\n\
                    dt_sim = 0.01\ndisturbance = zero\nseed = 7\nout_dir = runs/dubins\n\
                    target = min_of(box([-4, -4], [4, 4], [0, 1]), circle_complement([0, 0], 1, [0, 1]))\n";
        let exp = parse_experiment_config(text).unwrap();
        let serialized = experiment_to_config(&exp);
        let back = parse_experiment_config(&serialized).unwrap();
        assert_eq!(exp, back);
    }

    #[test]
    fn round_trip_of_defaults() {
        for model in ["double_integrator", "dubins_car", "single_integrator_1d"] {
            let exp = parse_experiment_config(&format!("model = {model}\n")).unwrap();
            let back = parse_experiment_config(&experiment_to_config(&exp)).unwrap();
            assert_eq!(exp, back, "round trip for {model}");
        }
    }

    #[test]
    fn constant_disturbance_requires_vector() {
        let err = parse_experiment_config(
            "model = double_integrator\ndisturbance = constant\n",
        )
        .unwrap_err();
        assert!(err.message.contains("disturbance_vector"), "{err}");
        let exp = parse_experiment_config(
            "model = double_integrator\ndisturbance = constant\ndisturbance_vector = [0.1]\n",
        )
        .unwrap();
        assert_eq!(exp.disturbance, DisturbanceSpec::Constant(vec![0.1]));
    }

    #[test]
    fn t0_outside_horizon_rejected() {
        let err = parse_experiment_config(
            "model = double_integrator\nhorizon = -2\nt0 = -3\n",
        )
        .unwrap_err();
        assert!(err.message.contains("t0"), "{err}");
    }
}
