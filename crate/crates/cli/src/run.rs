//! One experiment: both engines on the same data, cross-checked, with the
//! report, timings and CSV dumps written to the output directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use kolmo::bsde::{
    feynman_kac_residual, lsmc_solve, moment_report, represent, y0_samples, BsdeProblem, FeynmanKacReport,
    LsmcSettings, MomentReport, Representation,
};
use kolmo::driver::{validate_driver, DriverValidation};
use kolmo::mild::{
    apriori_report, gauge_transform, picard_lipschitz, relation_audit, solve_monotone, AprioriReport, MonotoneSettings,
    PicardSettings, RelationAudit, SolveReport,
};
use kolmo::paths::{
    bracket_residual, ito_residual, martingale_check, sample, BracketReport, ItoReport, MartingaleReport,
};
use kolmo::stats::Estimate;
use kolmo::{Error, SpaceTimeField};
use serde::Serialize;

use crate::config::{DriverSpec, ExperimentConfig, SemigroupKind, SolverKind, StartSpec, TerminalSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Named pass/fail line with signed slack (`>= 0` passes).
#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub slack: f64,
    pub pass: bool,
}

impl CheckLine {
    fn at_most(name: &str, measured: f64, threshold: f64) -> Self {
        let slack = threshold - measured;
        CheckLine { name: name.into(), measured, threshold, slack, pass: slack >= 0.0 }
    }

    fn flag(name: &str, ok: bool) -> Self {
        let v = if ok { 1.0 } else { 0.0 };
        CheckLine { name: name.into(), measured: v, threshold: 1.0, slack: v - 1.0, pass: ok }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GaugeSummary {
    pub identity: bool,
    /// `α_T`
    pub alpha_horizon: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathSummary {
    pub scheme: String,
    pub bracket: BracketReport,
    pub martingale: MartingaleReport,
    pub ito: ItoReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct BsdeSummary {
    pub y0: Estimate,
    pub picard_iters: usize,
    pub max_condition: f64,
    pub ridged_steps: usize,
}

/// Every key is always present; sections after a failure are `null`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema: u32,
    pub config: ExperimentConfig,
    pub status: String,
    pub error: Option<String>,
    pub driver_validation: Option<DriverValidation>,
    pub gauge: Option<GaugeSummary>,
    pub solve: Option<SolveReport>,
    pub relation_audit: Option<RelationAudit>,
    pub apriori: Option<AprioriReport>,
    pub paths: Option<PathSummary>,
    pub bsde: Option<BsdeSummary>,
    pub representation: Option<Representation>,
    pub feynman_kac: Option<FeynmanKacReport>,
    pub moments: Option<MomentReport>,
    pub checks: Vec<CheckLine>,
}

/// Output of [`run`]: the deterministic report plus wall-clock stage timings.
pub struct RunOutcome {
    pub report: RunReport,
    pub timings: BTreeMap<String, f64>,
    pub u: Option<SpaceTimeField>,
    pub y0_samples: Vec<f64>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.report.status == "pass"
    }
}

struct Clock(BTreeMap<String, f64>, Instant);

impl Clock {
    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.0.insert(stage.to_string(), (now - self.1).as_secs_f64());
        self.1 = now;
    }
}

/// Closed form `u(0, x₀)` where one exists: OU drift, `f = a y`, `φ(x) = x_i`.
fn closed_form_y0(cfg: &ExperimentConfig) -> Option<f64> {
    match (&cfg.problem.driver, &cfg.problem.terminal, &cfg.paths.start, cfg.semigroup.kind) {
        (
            DriverSpec::Linear { a, source },
            TerminalSpec::Coordinate { axis },
            StartSpec::Point(x),
            SemigroupKind::OuAnalytic,
        ) if *source == 0.0 => {
            let t = cfg.problem.horizon;
            Some(((a + cfg.semigroup.lambdas[*axis]) * t).exp() * x[*axis])
        }
        _ => None,
    }
}

pub fn run(cfg: &ExperimentConfig) -> RunOutcome {
    let mut report = RunReport {
        schema: SCHEMA_VERSION,
        config: cfg.clone(),
        status: "fail".into(),
        error: None,
        driver_validation: None,
        gauge: None,
        solve: None,
        relation_audit: None,
        apriori: None,
        paths: None,
        bsde: None,
        representation: None,
        feynman_kac: None,
        moments: None,
        checks: Vec::new(),
    };
    let mut clock = Clock(BTreeMap::new(), Instant::now());
    let mut u_out = None;
    let mut samples = Vec::new();
    let result = pipeline(cfg, &mut report, &mut clock, &mut u_out, &mut samples);
    match result {
        Ok(()) => {
            report.status = if report.checks.iter().all(|c| c.pass) { "pass" } else { "fail" }.into();
        }
        Err(e) => {
            report.error = Some(e.to_string());
            report.status = "fail".into();
        }
    }
    RunOutcome { report, timings: clock.0, u: u_out, y0_samples: samples }
}

fn pipeline(
    cfg: &ExperimentConfig,
    report: &mut RunReport,
    clock: &mut Clock,
    u_out: &mut Option<SpaceTimeField>,
    samples_out: &mut Vec<f64>,
) -> kolmo::Result<()> {
    let built = cfg.build()?;
    let problem = &built.problem;
    clock.lap("build");

    let validation = validate_driver(problem.driver.as_ref(), problem.horizon, 2000, cfg.seed);
    report.checks.push(CheckLine::flag("driver_structure", validation.ok()));
    report.driver_validation = Some(validation);
    let gauged = gauge_transform(problem)?;
    report.gauge = Some(GaugeSummary {
        identity: problem.driver.meta().mono_rate.is_zero(),
        alpha_horizon: gauged.alphas.last().copied().unwrap_or(0.0),
    });
    clock.lap("validate");

    let lipschitz = problem.driver.meta().lipschitz_y.is_finite();
    let monotone = match cfg.problem.solver {
        SolverKind::Auto => !lipschitz,
        SolverKind::Picard => false,
        SolverKind::Monotone => true,
    };
    let (u, solve) = if monotone {
        solve_monotone(problem, &MonotoneSettings::default())?
    } else {
        picard_lipschitz(problem, &PicardSettings::default())?
    };
    report.checks.push(CheckLine::flag("solver_converged", solve.converged));
    report.solve = Some(solve);
    clock.lap("solve");

    let audit = relation_audit(problem, &u)?;
    report.checks.push(CheckLine::at_most(
        "energy_slack_negative_part",
        -audit.worst_energy_slack().min(0.0),
        5.0 * cfg.dt(),
    ));
    if let Some(m) = audit.positivity_min {
        report.checks.push(CheckLine::at_most("maximum_principle", -m, 1e-10));
    }
    report.relation_audit = Some(audit);
    report.apriori = Some(apriori_report(problem, &u)?);
    clock.lap("audit");

    let ens = sample(&problem.semigroup, &built.path_config)?;
    if cfg.paths.export {
        if let Some(dir) = &cfg.out {
            std::fs::create_dir_all(dir)?;
            ens.write_binary(&Path::new(dir).join("ensemble"))?;
        }
    }
    let diffusion = problem.semigroup.diffusion()?;
    let bracket = bracket_residual(&ens, &diffusion)?;
    report.checks.push(CheckLine::at_most("bracket_law_z", bracket.worst_z(), 3.0));
    let martingale = martingale_check(&ens, 2)?;
    let disc = problem.discretization()?;
    let f_slices = u
        .times
        .iter()
        .zip(&u.slices)
        .map(|(&t, s)| problem.driver_field(&disc, t, s))
        .collect::<kolmo::Result<Vec<_>>>()?;
    let f_field = SpaceTimeField::new(u.times.clone(), f_slices)?;
    let ito = ito_residual(&ens, &problem.space, &u, Some(&f_field), None)?;
    report.paths = Some(PathSummary { scheme: format!("{:?}", ens.scheme).to_lowercase(), bracket, martingale, ito });
    clock.lap("paths");

    let terminal = cfg.problem.terminal.closure();
    let bp = BsdeProblem::from_terminal_fn(&ens, terminal, problem.driver.clone(), diffusion.clone(), 0.0)?;
    let settings = LsmcSettings { degree: Some(cfg.bsde.degree), picard_iters: cfg.bsde.picard_iters };
    let sol = lsmc_solve(&bp, &settings)?;
    report.bsde = Some(BsdeSummary {
        y0: sol.y0[0],
        picard_iters: sol.picard_iters,
        max_condition: sol.diagnostics.iter().map(|d| d.z.condition.max(d.y.condition)).fold(0.0, f64::max),
        ridged_steps: sol.diagnostics.iter().filter(|d| d.z.ridge > 0.0 || d.y.ridge > 0.0).count(),
    });
    *samples_out = y0_samples(&bp, &sol);
    clock.lap("bsde");

    let xi: Vec<f64> = bp.terminal.clone();
    let rep = represent(&xi, &ens, &diffusion, cfg.bsde.degree)?;
    let excess = rep.energy.value - rep.half_second_moment.value;
    report.checks.push(CheckLine::at_most("representation_energy_bound", excess, 3.0 * rep.gap.se));
    report.representation = Some(rep);
    clock.lap("represent");

    let fk = feynman_kac_residual(&u, &problem.space, &sol, &bp)?;
    let tol = (3.0 * fk.y0.se).max(0.02 * fk.u0.abs());
    report.checks.push(CheckLine::at_most("feynman_kac_y0", fk.y0_gap, tol));
    if let Some(exact) = closed_form_y0(cfg) {
        let tol = (3.0 * fk.y0.se).max(0.02 * exact.abs());
        report.checks.push(CheckLine::at_most("closed_form_y0", (fk.y0.value - exact).abs(), tol));
    }
    report.feynman_kac = Some(fk);
    report.moments = Some(moment_report(&sol, &bp, cfg.bsde.p)?);
    clock.lap("cross_check");
    *u_out = Some(u);
    Ok(())
}

/// `report.json`, `timings.json`, `u.csv` and `y0_hist.csv` under `dir`.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> kolmo::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), to_json(&outcome.report)? + "\n")?;
    std::fs::write(dir.join("timings.json"), to_json(&outcome.timings)? + "\n")?;
    if let Some(u) = &outcome.u {
        write_field_csv(u, &outcome.report.config, &dir.join("u.csv"))?;
    }
    write_histogram(&outcome.y0_samples, 40, &dir.join("y0_hist.csv"))?;
    Ok(())
}

pub fn to_json<S: Serialize>(v: &S) -> kolmo::Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.into()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Columns `t, x0..x{d-1}, u0..u{l-1}`, one row per time node and grid node.
pub fn write_field_csv(u: &SpaceTimeField, cfg: &ExperimentConfig, path: &Path) -> kolmo::Result<()> {
    let built = cfg.build()?;
    let space = &built.problem.space;
    let (d, l) = (space.dim(), u.comps());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|a| format!("x{a}")));
    header.extend((0..l).map(|c| format!("u{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for (t, s) in u.times.iter().zip(&u.slices) {
        for i in 0..space.n_nodes() {
            let mut row = vec![format!("{t:e}")];
            row.extend(space.node(i).iter().map(|x| format!("{x:e}")));
            row.extend(s.at(i).iter().map(|v| format!("{v:e}")));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Columns `lo, hi, count`.
pub fn write_histogram(samples: &[f64], bins: usize, path: &Path) -> kolmo::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["lo", "hi", "count"]).map_err(csv_err)?;
    if !samples.is_empty() {
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for s in samples {
            counts[(((s - lo) / width) as usize).min(bins - 1)] += 1;
        }
        for (k, c) in counts.iter().enumerate() {
            let a = lo + k as f64 * width;
            w.write_record([format!("{a:e}"), format!("{:e}", a + width), c.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
