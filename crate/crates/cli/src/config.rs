//! Experiment configuration: JSON with nested blocks, optionally layered on a
//! named preset.

use std::path::Path;
use std::sync::Arc;

use kolmo::driver::{FnDriver, Preset, PresetDriver};
use kolmo::paths::{PathConfig, Scheme, Start, MAX_PATHS};
use kolmo::semigroup::{Perturbation, SemigroupSpec};
use kolmo::space::TruncatedSpace;
use kolmo::DriverRef;
use kolmo::{Error, Problem};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::presets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceBlock {
    pub dim: usize,
    /// Axis variances of the reference measure; the invariant variances of
    /// the linear drift when absent.
    #[serde(default)]
    pub variances: Option<Vec<f64>>,
    pub quad_order: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemigroupKind {
    OuAnalytic,
    McEuler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemigroupBlock {
    pub kind: SemigroupKind,
    pub lambdas: Vec<f64>,
    pub noise: Vec<f64>,
    /// `"dissipative"` for `F(x) = -x³/(1+x²)` per axis; only with `mc_euler`.
    #[serde(default)]
    pub drift: Option<String>,
    #[serde(default = "default_mc_steps")]
    pub steps_per_unit: usize,
    #[serde(default = "default_mc_paths")]
    pub paths: usize,
}

fn default_mc_steps() -> usize {
    64
}

fn default_mc_paths() -> usize {
    4000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    /// `φ(x) = x_axis`
    Coordinate {
        axis: usize,
    },
    Tanh {
        axis: usize,
    },
    Cos {
        axis: usize,
    },
    /// `φ(x) = e^{-|x|²}`
    Gauss,
    Constant {
        value: f64,
    },
}

impl TerminalSpec {
    pub fn axis(&self) -> Option<usize> {
        match self {
            TerminalSpec::Coordinate { axis } | TerminalSpec::Tanh { axis } | TerminalSpec::Cos { axis } => Some(*axis),
            _ => None,
        }
    }

    pub fn closure(&self) -> impl Fn(&[f64], &mut [f64]) + Send + Sync + Clone + 'static {
        let spec = self.clone();
        move |x: &[f64], o: &mut [f64]| {
            o[0] = match &spec {
                TerminalSpec::Coordinate { axis } => x[*axis],
                TerminalSpec::Tanh { axis } => x[*axis].tanh(),
                TerminalSpec::Cos { axis } => x[*axis].cos(),
                TerminalSpec::Gauss => (-x.iter().map(|v| v * v).sum::<f64>()).exp(),
                TerminalSpec::Constant { value } => *value,
            }
        }
    }

    pub fn bounded(&self) -> bool {
        !matches!(self, TerminalSpec::Coordinate { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverSpec {
    /// `a y + source`
    Linear {
        a: f64,
        #[serde(default)]
        source: f64,
    },
    /// `y_coef y + z_coef sin(z[axis])`
    SinZ { y_coef: f64, z_coef: f64, axis: usize },
    /// `-coef y³`
    Cubic { coef: f64 },
    /// `Σ_k y_poly[k] y^k + Σ_a z_coefs[a] z_a + constant`
    Table { y_poly: Vec<f64>, z_coefs: Vec<f64>, constant: f64 },
}

impl DriverSpec {
    pub fn build(&self, dim: usize) -> kolmo::Result<DriverRef> {
        let preset = match self {
            DriverSpec::Linear { a, source } if *a == 0.0 => {
                let c = *source;
                return Ok(FnDriver::source(1, dim, c.abs(), move |_, _, o| o[0] = c).into_ref());
            }
            DriverSpec::Linear { a, source } => {
                let c = *source;
                let src: Option<(Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>, f64)> =
                    if c == 0.0 { None } else { Some((Arc::new(move |_, _| c), c.abs())) };
                Preset::Linear { a: *a, source: src }
            }
            DriverSpec::SinZ { y_coef, z_coef, axis } => Preset::SinZ { y_coef: *y_coef, z_coef: *z_coef, axis: *axis },
            DriverSpec::Cubic { coef } => Preset::Cubic { coef: *coef },
            DriverSpec::Table { y_poly, z_coefs, constant } => {
                Preset::Table { y_poly: y_poly.clone(), z_coefs: z_coefs.clone(), constant: *constant }
            }
        };
        Ok(PresetDriver::new(preset, 1, dim)?.into_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Picard when the driver is Lipschitz in `y`, the monotone pipeline otherwise.
    Auto,
    Picard,
    Monotone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub terminal: TerminalSpec,
    pub driver: DriverSpec,
    pub horizon: f64,
    pub steps: usize,
    #[serde(default = "default_solver")]
    pub solver: SolverKind,
}

fn default_solver() -> SolverKind {
    SolverKind::Auto
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StartSpec {
    Point(Vec<f64>),
    /// Only `"mu"` is accepted.
    Named(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeSpec {
    Auto,
    Exact,
    Euler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsBlock {
    pub start: StartSpec,
    pub paths: usize,
    #[serde(default = "default_scheme")]
    pub scheme: SchemeSpec,
    /// Write the ensemble as binary column files next to the report.
    #[serde(default)]
    pub export: bool,
}

fn default_scheme() -> SchemeSpec {
    SchemeSpec::Auto
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeBlock {
    pub degree: usize,
    pub picard_iters: usize,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Analytic,
    Probabilistic,
    All,
}

impl std::str::FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "analytic" => Ok(Selector::Analytic),
            "probabilistic" => Ok(Selector::Probabilistic),
            "all" => Ok(Selector::All),
            other => Err(format!("unknown selector {other:?} (expected analytic, probabilistic or all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub preset: Option<String>,
    pub space: SpaceBlock,
    pub semigroup: SemigroupBlock,
    pub problem: ProblemBlock,
    pub paths: PathsBlock,
    pub bsde: BsdeBlock,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub check: Option<Selector>,
}

/// Failure to obtain a usable configuration.
#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    Invalid(Vec<String>),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(m) => write!(f, "cannot read config: {m}"),
            ConfigError::Parse(m) => write!(f, "cannot parse config: {m}"),
            ConfigError::Invalid(v) => {
                writeln!(f, "invalid config:")?;
                for p in v {
                    writeln!(f, "  - {p}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // tagged enums are replaced wholesale so stale fields never leak in
                    Some(slot) if slot.is_object() && v.is_object() && v.get("kind").is_none() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parse JSON text, layer it on its preset (or on `ou1d_linear`), and validate.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let user: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if !user.is_object() {
        return Err(ConfigError::Parse("top level must be an object".into()));
    }
    let name = match user.get("preset") {
        None | Some(Value::Null) => presets::DEFAULT,
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(ConfigError::Parse("preset must be a string".into())),
    };
    let base = presets::by_name(name).ok_or_else(|| {
        ConfigError::Invalid(vec![format!("unknown preset {name:?} (available: {})", presets::NAMES.join(", "))])
    })?;
    let mut value = serde_json::to_value(base).map_err(|e| ConfigError::Parse(e.to_string()))?;
    merge(&mut value, user);
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let problems = cfg.validate();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(problems))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Engine objects assembled from a validated configuration.
pub struct Built {
    pub problem: Problem,
    pub start: Start<f64>,
    pub path_config: PathConfig<f64>,
}

impl ExperimentConfig {
    pub fn dt(&self) -> f64 {
        self.problem.horizon / self.problem.steps as f64
    }

    /// Every violation, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let d = self.space.dim;
        if d == 0 || d > kolmo::space::MAX_DIM {
            v.push(format!("space.dim {d} must be in 1..={}", kolmo::space::MAX_DIM));
        }
        if self.space.quad_order < 2 {
            v.push(format!("space.quad_order {} must be at least 2", self.space.quad_order));
        }
        if let Some(var) = &self.space.variances {
            if var.len() != d {
                v.push(format!("space.variances has {} entries for dim {d}", var.len()));
            }
            if var.iter().any(|x| !(*x > 0.0)) {
                v.push("space.variances must be positive".into());
            }
        }
        let sg = &self.semigroup;
        if sg.lambdas.len() != d {
            v.push(format!("semigroup.lambdas has {} entries for dim {d}", sg.lambdas.len()));
        }
        if sg.noise.len() != d {
            v.push(format!("semigroup.noise has {} entries for dim {d}", sg.noise.len()));
        }
        if sg.lambdas.iter().any(|l| !(*l < 0.0)) {
            v.push("semigroup.lambdas must be negative".into());
        }
        if sg.noise.iter().any(|c| !(*c > 0.0)) {
            v.push("semigroup.noise must be positive".into());
        }
        match (&sg.drift, sg.kind) {
            (Some(name), _) if name != "dissipative" => v.push(format!("unknown semigroup.drift {name:?}")),
            (Some(_), SemigroupKind::OuAnalytic) => v.push("semigroup.drift needs kind mc_euler".into()),
            _ => {}
        }
        if sg.kind == SemigroupKind::McEuler && (sg.steps_per_unit == 0 || sg.paths < 2) {
            v.push("mc_euler needs steps_per_unit >= 1 and paths >= 2".into());
        }
        let p = &self.problem;
        if let Some(a) = p.terminal.axis() {
            if a >= d {
                v.push(format!("problem.terminal axis {a} outside dim {d}"));
            }
        }
        match &p.driver {
            DriverSpec::SinZ { axis, .. } if *axis >= d => {
                v.push(format!("problem.driver axis {axis} outside dim {d}"))
            }
            DriverSpec::Cubic { coef } if *coef < 0.0 => v.push("problem.driver cubic coef must be nonnegative".into()),
            DriverSpec::Table { z_coefs, .. } if z_coefs.len() != d => {
                v.push(format!("problem.driver table has {} z coefficients but space.dim is {d}", z_coefs.len()))
            }
            _ => {}
        }
        if !(p.horizon > 0.0) {
            v.push(format!("problem.horizon {} must be positive", p.horizon));
        }
        if p.steps < 2 {
            v.push(format!("problem.steps {} must be at least 2", p.steps));
        }
        let lip_y = match &p.driver {
            DriverSpec::Linear { a, .. } => Some(a.abs()),
            DriverSpec::SinZ { y_coef, .. } => Some(y_coef.abs()),
            DriverSpec::Cubic { coef } if *coef == 0.0 => Some(0.0),
            DriverSpec::Table { y_poly, .. } if y_poly.iter().skip(2).all(|c| *c == 0.0) => {
                Some(y_poly.get(1).copied().unwrap_or(0.0).abs())
            }
            _ => None,
        };
        if p.solver == SolverKind::Picard && lip_y.is_none() {
            v.push("problem.solver picard needs a driver Lipschitz in y".into());
        }
        if let Some(c) = lip_y {
            if p.steps >= 2 && p.horizon > 0.0 && !(self.dt() * c < 0.5) {
                v.push(format!("Δt·C_y = {} must stay below 1/2", self.dt() * c));
            }
        }
        if lip_y.is_none() && !p.terminal.bounded() {
            v.push("a driver that is not Lipschitz in y needs a bounded terminal value".into());
        }
        let paths = &self.paths;
        match &paths.start {
            StartSpec::Point(x) if x.len() != d => {
                v.push(format!("paths.start has {} coordinates for dim {d}", x.len()))
            }
            StartSpec::Named(s) if s != "mu" => v.push(format!("paths.start {s:?} must be a point or \"mu\"")),
            _ => {}
        }
        if paths.paths < 2 || paths.paths > MAX_PATHS {
            v.push(format!("paths.paths {} must be in 2..={MAX_PATHS}", paths.paths));
        }
        if paths.scheme == SchemeSpec::Exact && sg.drift.is_some() {
            v.push("paths.scheme exact is unavailable with a drift perturbation".into());
        }
        let b = &self.bsde;
        if b.degree == 0 {
            v.push("bsde.degree must be at least 1".into());
        }
        if b.picard_iters == 0 {
            v.push("bsde.picard_iters must be at least 1".into());
        }
        if !(b.p > 1.0) {
            v.push(format!("bsde.p {} must exceed 1", b.p));
        }
        if let Some(name) = &self.preset {
            if presets::by_name(name).is_none() {
                v.push(format!("unknown preset {name:?}"));
            }
        }
        v
    }

    pub fn build(&self) -> kolmo::Result<Built> {
        let sg = &self.semigroup;
        let spec = match sg.kind {
            SemigroupKind::OuAnalytic => SemigroupSpec::ou(sg.lambdas.clone(), sg.noise.clone())?,
            SemigroupKind::McEuler => {
                let pert = if sg.drift.is_some() { Perturbation::Dissipative } else { Perturbation::None };
                SemigroupSpec::mc_euler(
                    sg.lambdas.clone(),
                    sg.noise.clone(),
                    pert,
                    sg.steps_per_unit,
                    sg.paths,
                    self.seed,
                )?
            }
        };
        let variances = self.space.variances.clone().unwrap_or_else(|| spec.invariant_variances());
        let space = TruncatedSpace::build(self.space.dim, &variances, self.space.quad_order)?;
        let driver = self.problem.driver.build(self.space.dim)?;
        let problem = Problem::from_fn(
            space,
            spec,
            1,
            self.problem.terminal.closure(),
            driver,
            self.problem.horizon,
            self.problem.steps,
        )?;
        let start = match &self.paths.start {
            StartSpec::Point(x) => Start::Point(x.clone()),
            StartSpec::Named(_) => Start::Invariant,
        };
        let scheme = match self.paths.scheme {
            SchemeSpec::Auto => Scheme::Auto,
            SchemeSpec::Exact => Scheme::Exact,
            SchemeSpec::Euler => Scheme::Euler,
        };
        let path_config = PathConfig {
            start: start.clone(),
            horizon: self.problem.horizon,
            steps: self.problem.steps,
            paths: self.paths.paths,
            seed: self.seed,
            scheme,
        };
        Ok(Built { problem, start, path_config })
    }
}

impl From<ConfigError> for Error {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Invalid(v) => Error::Config(v),
            other => Error::Config(vec![other.to_string()]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(r#"{"preset": "ou1d_linear"}"#).unwrap();
        assert_eq!(cfg.problem.steps, 64);
        assert_eq!(cfg.paths.paths, 100_000);
        assert_eq!(cfg.bsde.degree, 4);
    }

    #[test]
    fn dimension_mismatch_is_listed() {
        let text = r#"{"preset": "ou1d_linear",
            "space": {"dim": 2, "quad_order": 12},
            "semigroup": {"lambdas": [-1, -1], "noise": [1, 1]},
            "problem": {"driver": {"kind": "table", "y_poly": [0, -1], "z_coefs": [0.5], "constant": 0}},
            "paths": {"start": [0.0, 0.0]}}"#;
        match parse_config(text) {
            Err(ConfigError::Invalid(v)) => {
                assert_eq!(v.len(), 1, "{v:?}");
                assert!(v[0].contains("z coefficients"), "{v:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_violations_are_reported() {
        let text = r#"{"problem": {"steps": 1}, "paths": {"paths": 1}, "bsde": {"p": 1.0}}"#;
        match parse_config(text) {
            Err(ConfigError::Invalid(v)) => assert!(v.len() >= 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_preset_and_keys() {
        assert!(matches!(parse_config(r#"{"preset": "nope"}"#), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse_config(r#"{"bogus": 1}"#), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn loading_twice_is_identical() {
        let text = r#"{"preset": "ou1d_cubic", "seed": 9}"#;
        assert_eq!(parse_config(text).unwrap(), parse_config(text).unwrap());
    }

    #[test]
    fn coarse_step_for_the_driver_is_rejected() {
        let text = r#"{"problem": {"driver": {"kind": "linear", "a": -40}, "steps": 4}}"#;
        assert!(matches!(parse_config(text), Err(ConfigError::Invalid(_))));
    }
}
