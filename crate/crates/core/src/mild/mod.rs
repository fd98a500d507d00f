//! Mild solutions `u_t = P_{T-t}φ + ∫_t^T P_{s-t} f_s ds` on a uniform time
//! grid: the linear solve, the Lipschitz Picard fixed point, the gauge
//! transform and the monotone truncation/mollification pipeline.

mod audit;

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use audit::{apriori_report, relation_audit, AprioriReport, RelationAudit};

use crate::driver::{mollify_driver, truncate_driver, Driver, DriverRef, Gauged};
use crate::error::{Error, Result};
use crate::semigroup::{Kernel, SemigroupSpec};
use crate::space::{t_norm_with, DiffusionCoefficient, Field, NodalDiffusion, SpaceTimeField, TruncatedSpace};
use crate::Real;

pub type TerminalFn<T> = Arc<dyn Fn(&[T], &mut [T]) + Send + Sync>;

/// Terminal value problem `(∂_t + L)u + f(t, x, u, A^{1/2}∇u) = 0`, `u_T = φ`.
#[derive(Clone)]
pub struct SemilinearProblem<T: Real> {
    pub space: TruncatedSpace<T>,
    pub semigroup: SemigroupSpec<T>,
    pub diffusion: DiffusionCoefficient<T>,
    pub terminal: Field<T>,
    /// Closed form of the terminal value; when present, `P_{T-t}φ` is
    /// evaluated by quadrature of `φ` itself rather than of its interpolant.
    pub terminal_fn: Option<TerminalFn<T>>,
    pub driver: DriverRef<T>,
    pub horizon: T,
    pub steps: usize,
    disc: OnceLock<Arc<Discretization<T>>>,
}

impl<T: Real> std::fmt::Debug for SemilinearProblem<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemilinearProblem")
            .field("dim", &self.space.dim())
            .field("driver", &self.driver.name())
            .field("horizon", &self.horizon)
            .field("steps", &self.steps)
            .finish()
    }
}

/// Cached time grid, lag kernels and nodal diffusion.
pub struct Discretization<T> {
    pub times: Vec<T>,
    pub dt: T,
    pub kernels: Vec<Kernel<T>>,
    pub nodal: NodalDiffusion<T>,
}

impl<T: Real> SemilinearProblem<T> {
    pub fn new(
        space: TruncatedSpace<T>,
        semigroup: SemigroupSpec<T>,
        terminal: Field<T>,
        driver: DriverRef<T>,
        horizon: T,
        steps: usize,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        if steps < 2 {
            problems.push(format!("time_steps {steps} < 2"));
        }
        if !(horizon >= T::zero()) || !horizon.is_finite() {
            problems.push(format!("horizon {horizon} must be finite and nonnegative"));
        }
        if semigroup.dim() != space.dim() {
            problems.push(format!("semigroup dim {} vs space dim {}", semigroup.dim(), space.dim()));
        }
        if driver.dim() != space.dim() {
            problems.push(format!("driver dim {} vs space dim {}", driver.dim(), space.dim()));
        }
        if driver.comps() != terminal.comps {
            problems.push(format!("driver has {} components, terminal has {}", driver.comps(), terminal.comps));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        space.check_field(&terminal)?;
        if terminal.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("terminal data is not bounded".into()));
        }
        let diffusion = semigroup.diffusion()?;
        Ok(SemilinearProblem {
            space,
            semigroup,
            diffusion,
            terminal,
            terminal_fn: None,
            driver,
            horizon,
            steps,
            disc: OnceLock::new(),
        })
    }

    /// Problem whose terminal value is given in closed form with `comps` outputs.
    pub fn from_fn<F>(
        space: TruncatedSpace<T>,
        semigroup: SemigroupSpec<T>,
        comps: usize,
        terminal: F,
        driver: DriverRef<T>,
        horizon: T,
        steps: usize,
    ) -> Result<Self>
    where
        F: Fn(&[T], &mut [T]) + Send + Sync + 'static,
    {
        let values = space.sample(comps, |x, o| terminal(x, o));
        let mut p = Self::new(space, semigroup, values, driver, horizon, steps)?;
        p.terminal_fn = Some(Arc::new(terminal));
        Ok(p)
    }

    /// Same problem with different data; the discretization cache is shared.
    pub fn with_data(&self, terminal: Field<T>, driver: DriverRef<T>) -> Result<Self> {
        self.space.check_field(&terminal)?;
        if driver.comps() != terminal.comps || driver.dim() != self.space.dim() {
            return Err(Error::Shape("driver and terminal disagree with the problem".into()));
        }
        let mut p = self.clone();
        p.terminal = terminal;
        p.terminal_fn = None;
        p.driver = driver;
        Ok(p)
    }

    /// Same terminal value (closed form included) with another driver.
    pub fn with_driver(&self, driver: DriverRef<T>) -> Result<Self> {
        if driver.comps() != self.comps() || driver.dim() != self.space.dim() {
            return Err(Error::Shape("driver disagrees with the problem".into()));
        }
        let mut p = self.clone();
        p.driver = driver;
        Ok(p)
    }

    /// Terminal value multiplied by `k`, keeping the closed form.
    pub fn with_scaled_terminal(&self, k: T, driver: DriverRef<T>) -> Result<Self> {
        let mut p = self.with_driver(driver)?;
        p.terminal = self.terminal.map(|v| v * k);
        p.terminal_fn = self.terminal_fn.clone().map(|g| -> TerminalFn<T> {
            Arc::new(move |x: &[T], o: &mut [T]| {
                g(x, o);
                o.iter_mut().for_each(|v| *v *= k);
            })
        });
        Ok(p)
    }

    /// `P_{T-t_i}(g∘φ)` for every time node `i`, with `g` mapping the `comps()`
    /// values of `φ` to `out_comps` values.
    pub fn propagate_terminal<G>(&self, disc: &Discretization<T>, out_comps: usize, g: G) -> Result<Vec<Field<T>>>
    where
        G: Fn(&[T], &mut [T]) + Sync,
    {
        let l = self.comps();
        let n = disc.times.len() - 1;
        let mut lags = match &self.terminal_fn {
            Some(phi) => self.semigroup.apply_map_lags(&self.space, disc.dt, n, out_comps, |x, o| {
                let mut v = vec![T::zero(); l];
                phi(x, &mut v);
                g(&v, o);
            })?,
            None => {
                let mut values = vec![T::zero(); self.space.n_nodes() * out_comps];
                for (k, v) in self.terminal.values.chunks(l).enumerate() {
                    g(v, &mut values[k * out_comps..(k + 1) * out_comps]);
                }
                return Ok(propagate(&self.space, disc, &Field { comps: out_comps, values }));
            }
        };
        lags.reverse();
        Ok(lags)
    }

    /// `P_{T-t_i}φ` for every time node `i`.
    pub fn propagated_terminal(&self, disc: &Discretization<T>) -> Result<Vec<Field<T>>> {
        self.propagate_terminal(disc, self.comps(), |v, o| o.copy_from_slice(v))
    }

    pub fn comps(&self) -> usize {
        self.terminal.comps
    }

    pub fn dt(&self) -> T {
        self.horizon / T::from_usize_lossy(self.steps)
    }

    pub fn times(&self) -> Vec<T> {
        (0..=self.steps).map(|i| self.dt() * T::from_usize_lossy(i)).collect()
    }

    pub fn discretization(&self) -> Result<Arc<Discretization<T>>> {
        if let Some(d) = self.disc.get() {
            return Ok(d.clone());
        }
        let kernels = self.semigroup.lag_kernels(&self.space, self.dt(), self.steps)?;
        let d = Arc::new(Discretization {
            times: self.times(),
            dt: self.dt(),
            kernels,
            nodal: self.diffusion.nodal(&self.space),
        });
        let _ = self.disc.set(d.clone());
        Ok(self.disc.get().cloned().unwrap_or(d))
    }

    /// `f(t, ·, u, A^{1/2}∇u)` at every node.
    pub fn driver_field(&self, disc: &Discretization<T>, t: T, u: &Field<T>) -> Result<Field<T>> {
        driver_field(&self.space, &disc.nodal, self.driver.as_ref(), t, u)
    }

    /// `t_norm` with the cached nodal diffusion.
    pub fn t_norm(&self, u: &SpaceTimeField<T>) -> Result<T> {
        let disc = self.discretization()?;
        t_norm_with(&self.space, &disc.nodal, u)
    }
}

pub(crate) fn driver_field<T: Real>(
    space: &TruncatedSpace<T>,
    nodal: &NodalDiffusion<T>,
    driver: &dyn Driver<T>,
    t: T,
    u: &Field<T>,
) -> Result<Field<T>> {
    let l = u.comps;
    let d = space.dim();
    let grad = if driver.meta().source_only { None } else { Some(space.gradient(u)?) };
    let values: Vec<T> = (0..space.n_nodes())
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut z = vec![T::zero(); l * d];
            if let Some(g) = &grad {
                nodal.scaled_gradient(i, g.at(i), &mut z);
            }
            let mut out = vec![T::zero(); l];
            driver.eval(t, space.node(i), u.at(i), &z, &mut out);
            out
        })
        .collect();
    Ok(Field { comps: l, values })
}

/// Trapezoid weight of node `j` on `[t_i, t_N]`.
fn weight<T: Real>(i: usize, j: usize, n: usize, dt: T) -> T {
    if i == n {
        T::zero()
    } else if j == i || j == n {
        dt * T::lit(0.5)
    } else {
        dt
    }
}

fn axpy<T: Real>(acc: &mut Field<T>, a: T, x: &Field<T>) {
    for (o, &v) in acc.values.iter_mut().zip(&x.values) {
        *o += a * v;
    }
}

/// `C_i = Σ_{j>=i} w_j K_{j-i} g_j` for every `i` (the time convolution of the mild form).
pub(crate) fn convolve<T: Real>(space: &TruncatedSpace<T>, disc: &Discretization<T>, g: &[Field<T>]) -> Vec<Field<T>> {
    let n = g.len() - 1;
    (0..=n)
        .into_par_iter()
        .map(|i| {
            let mut acc = Field::zeros(space.n_nodes(), g[0].comps);
            for j in i..=n {
                let w = weight(i, j, n, disc.dt);
                if w != T::zero() {
                    axpy(&mut acc, w, &disc.kernels[j - i].apply(space, &g[j]));
                }
            }
            acc
        })
        .collect()
}

/// `K_{N-i} φ` for every `i`.
pub(crate) fn propagate<T: Real>(space: &TruncatedSpace<T>, disc: &Discretization<T>, phi: &Field<T>) -> Vec<Field<T>> {
    let n = disc.times.len() - 1;
    (0..=n).into_par_iter().map(|i| disc.kernels[n - i].apply(space, phi)).collect()
}

/// Linear mild solution for a driver that depends on `(t, x)` only.
pub fn solve_linear<T: Real>(problem: &SemilinearProblem<T>) -> Result<SpaceTimeField<T>> {
    if !problem.driver.meta().source_only {
        return Err(Error::Precondition(format!(
            "solve_linear needs a driver independent of (y, z); got {}",
            problem.driver.name()
        )));
    }
    let times = problem.times();
    if problem.horizon == T::zero() {
        return SpaceTimeField::new(times, vec![problem.terminal.clone(); problem.steps + 1]);
    }
    let disc = problem.discretization()?;
    let zero = Field::zeros(problem.space.n_nodes(), problem.comps());
    let f: Vec<Field<T>> = times.iter().map(|&t| problem.driver_field(&disc, t, &zero)).collect::<Result<_>>()?;
    let base = problem.propagated_terminal(&disc)?;
    let conv = convolve(&problem.space, &disc, &f);
    let slices = base.into_iter().zip(conv).map(|(a, b)| a.zip_map(&b, |x, y| x + y)).collect();
    SpaceTimeField::new(times, slices)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PicardSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardSettings {
    fn default() -> Self {
        PicardSettings { tol: 1e-10, max_iter: 200 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WindowReport {
    pub t_start: f64,
    pub t_end: f64,
    pub iterations: usize,
    /// `‖u^{k+1} - u^k‖` on the window in the `‖·‖_T` norm.
    pub increments: Vec<f64>,
    /// Successive increment ratios, recorded while increments are above roundoff.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolveConstants {
    pub lipschitz_y: f64,
    pub lipschitz_z: f64,
    pub alpha: f64,
    pub m_t_estimate: f64,
    pub r: Option<f64>,
    pub k_hat: Option<f64>,
    pub n_schedule: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: String,
    pub iterations: usize,
    pub window_length: f64,
    /// `sqrt(M_T h)`, the contraction factor guaranteed on each window.
    pub contraction_bound: f64,
    pub windows: Vec<WindowReport>,
    pub constants: SolveConstants,
    /// `‖u_{n_{k+1}} - u_{n_k}‖_T` along the truncation schedule.
    pub cauchy_gaps: Vec<f64>,
    pub converged: bool,
}

impl SolveReport {
    pub fn max_ratio(&self) -> f64 {
        self.windows.iter().flat_map(|w| w.ratios.iter().copied()).fold(0.0, f64::max)
    }
}

/// `8 e^{2αT} · 2L² · max(1, T)`.
fn m_t_estimate(l: f64, alpha: f64, horizon: f64) -> f64 {
    8.0 * (2.0 * alpha * horizon).exp() * 2.0 * l * l * horizon.max(1.0)
}

/// Norm of `δ` restricted to slices `a..=b`.
fn window_norm<T: Real>(
    space: &TruncatedSpace<T>,
    nodal: &NodalDiffusion<T>,
    delta: &[Field<T>],
    dt: T,
) -> Result<f64> {
    let times: Vec<T> = (0..delta.len()).map(|k| dt * T::from_usize_lossy(k)).collect();
    let f = SpaceTimeField::new(times, delta.to_vec())?;
    Ok(t_norm_with(space, nodal, &f)?.as_f64())
}

/// Fixed point of the mild map by backward windows.
pub fn picard_lipschitz<T: Real>(
    problem: &SemilinearProblem<T>,
    settings: &PicardSettings,
) -> Result<(SpaceTimeField<T>, SolveReport)> {
    let meta = problem.driver.meta();
    let (ly, lz) = (meta.lipschitz_y.as_f64(), meta.lipschitz_z.as_f64());
    let lip = ly.max(lz);
    if !lip.is_finite() {
        return Err(Error::Precondition(format!(
            "driver {} is not Lipschitz in y; use the monotone pipeline",
            problem.driver.name()
        )));
    }
    let horizon = problem.horizon.as_f64();
    let alpha = problem.semigroup.drift_field().sector_alpha.as_f64();
    let m_t = m_t_estimate(lip, alpha, horizon);
    let n = problem.steps;
    let dt = problem.dt();
    let times = problem.times();
    let mut report = SolveReport {
        method: "picard".into(),
        constants: SolveConstants { lipschitz_y: ly, lipschitz_z: lz, alpha, m_t_estimate: m_t, ..Default::default() },
        ..Default::default()
    };
    if problem.horizon == T::zero() {
        report.converged = true;
        return Ok((SpaceTimeField::new(times, vec![problem.terminal.clone(); n + 1])?, report));
    }
    let disc = problem.discretization()?;
    let space = &problem.space;
    let h = if m_t > 0.0 { horizon.min(1.0 / (2.0 * m_t)) } else { horizon };
    let per = ((h / dt.as_f64() + 1e-9).floor() as usize).clamp(1, n);
    report.window_length = per as f64 * dt.as_f64();
    report.contraction_bound = (m_t * report.window_length).sqrt();

    let base = problem.propagated_terminal(&disc)?;
    let mut u: Vec<Field<T>> = base.clone();
    let mut f: Vec<Field<T>> = vec![Field::zeros(space.n_nodes(), problem.comps()); n + 1];
    f[n] = problem.driver_field(&disc, times[n], &u[n])?;
    let mut b = n;
    while b > 0 {
        let a = b.saturating_sub(per);
        // contributions of the already solved part [t_b, T]
        let tail: Vec<Field<T>> = (a..b)
            .into_par_iter()
            .map(|i| {
                let mut acc = base[i].clone();
                for j in b..=n {
                    axpy(&mut acc, weight(i, j, n, dt), &disc.kernels[j - i].apply(space, &f[j]));
                }
                acc
            })
            .collect();
        let mut win = WindowReport { t_start: times[a].as_f64(), t_end: times[b].as_f64(), ..Default::default() };
        let scale = (a..=b).map(|i| u[i].sup_norm().as_f64()).fold(1.0, f64::max);
        let floor = 1e3 * f64::EPSILON * scale;
        let mut converged = false;
        for _ in 0..settings.max_iter {
            for j in a..b {
                f[j] = problem.driver_field(&disc, times[j], &u[j])?;
            }
            let next: Vec<Field<T>> = (a..b)
                .into_par_iter()
                .map(|i| {
                    let mut acc = tail[i - a].clone();
                    for j in i..b {
                        axpy(&mut acc, weight(i, j, n, dt), &disc.kernels[j - i].apply(space, &f[j]));
                    }
                    acc
                })
                .collect();
            let mut delta: Vec<Field<T>> = next.iter().zip(&u[a..b]).map(|(x, y)| x.zip_map(y, |p, q| p - q)).collect();
            delta.push(Field::zeros(space.n_nodes(), problem.comps()));
            let inc = window_norm(space, &disc.nodal, &delta, dt)?;
            if let Some(&prev) = win.increments.last() {
                if prev > floor && inc > floor {
                    win.ratios.push(inc / prev);
                }
            }
            win.increments.push(inc);
            win.iterations += 1;
            for (k, v) in next.into_iter().enumerate() {
                u[a + k] = v;
            }
            if inc <= settings.tol * scale {
                converged = true;
                break;
            }
        }
        report.iterations += win.iterations;
        report.windows.push(win);
        if !converged {
            report.converged = false;
            return Err(Error::Convergence {
                message: format!(
                    "window [{}, {}] did not converge in {} iterations",
                    times[a], times[b], settings.max_iter
                ),
                report: Box::new(report),
            });
        }
        for j in a..b {
            f[j] = problem.driver_field(&disc, times[j], &u[j])?;
        }
        b = a;
    }
    report.converged = true;
    Ok((SpaceTimeField::new(times, u)?, report))
}

/// Problem with monotonicity rate normalised to zero, and the map back.
pub struct GaugedProblem<T: Real> {
    pub problem: SemilinearProblem<T>,
    /// `α_{t_i}` on the time grid.
    pub alphas: Vec<T>,
}

impl<T: Real> GaugedProblem<T> {
    /// `u_t = e^{-α_t} u*_t`.
    pub fn invert(&self, u: &SpaceTimeField<T>) -> SpaceTimeField<T> {
        scale_slices(u, &self.alphas, -T::one())
    }

    /// `u*_t = e^{α_t} u_t`.
    pub fn forward(&self, u: &SpaceTimeField<T>) -> SpaceTimeField<T> {
        scale_slices(u, &self.alphas, T::one())
    }
}

fn scale_slices<T: Real>(u: &SpaceTimeField<T>, alphas: &[T], sign: T) -> SpaceTimeField<T> {
    SpaceTimeField {
        times: u.times.clone(),
        slices: u
            .slices
            .iter()
            .zip(alphas)
            .map(|(s, &a)| {
                let k = (sign * a).exp();
                s.map(|v| v * k)
            })
            .collect(),
    }
}

/// `φ* = e^{α_T}φ`, `f*_t(y,z) = e^{α_t} f_t(e^{-α_t}y, e^{-α_t}z) - μ_t y`.
pub fn gauge_transform<T: Real>(problem: &SemilinearProblem<T>) -> Result<GaugedProblem<T>> {
    let rate = &problem.driver.meta().mono_rate;
    let alphas: Vec<T> = problem.times().iter().map(|&t| rate.alpha(t)).collect();
    if rate.is_zero() {
        return Ok(GaugedProblem { problem: problem.clone(), alphas });
    }
    let k = rate.alpha(problem.horizon).exp();
    let driver: DriverRef<T> = Arc::new(Gauged::new(problem.driver.clone(), problem.horizon));
    Ok(GaugedProblem { problem: problem.with_scaled_terminal(k, driver)?, alphas })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonotoneSettings {
    /// Truncation indices; `None` picks `n₀ · {1, 2, 4, 8, 16}`.
    pub schedule: Option<Vec<usize>>,
    pub tol: f64,
    pub picard: PicardSettings,
}

impl Default for MonotoneSettings {
    fn default() -> Self {
        MonotoneSettings { schedule: None, tol: 1e-5, picard: PicardSettings::default() }
    }
}

/// Radius `r = 1 + 2 K̂ (‖φ‖_∞ + ‖f⁰‖_∞)` with `K̂` read off the pilot
/// solution `P_{T-t}|φ| + (T-t)‖f⁰‖_∞` and inflated by `e^{CT}`.
fn truncation_radius<T: Real>(problem: &SemilinearProblem<T>, disc: &Discretization<T>) -> Result<(f64, f64)> {
    let phi_abs = problem.terminal.pointwise_norm();
    let phi_sup = phi_abs.sup_norm().as_f64();
    let f0 = problem.driver.meta().f0_bound.as_f64();
    let data = phi_sup + f0;
    if data == 0.0 {
        return Ok((1.0, 1.0));
    }
    let horizon = problem.horizon.as_f64();
    let propagated = problem.propagate_terminal(disc, 1, |v, o| o[0] = crate::scalar::norm2(v))?;
    let pilot = propagated
        .iter()
        .zip(&disc.times)
        .map(|(p, t)| p.sup_norm().as_f64() + (horizon - t.as_f64()) * f0)
        .fold(0.0, f64::max);
    let c = problem.driver.meta().lipschitz_z.as_f64();
    let k_hat = (pilot / data).max(1.0) * (c * horizon).exp();
    Ok((1.0 + 2.0 * k_hat * data, k_hat))
}

/// Default schedule `n₀ · {1, 2, 4, 8, 16}` with `n₀` the smallest power of two
/// that is at least 4 and at least `sup f^{',r+1}` on the grid.
fn default_schedule<T: Real>(problem: &SemilinearProblem<T>, r: f64) -> Vec<usize> {
    let times = problem.times();
    let mut g = 0.0f64;
    for &t in &times {
        for i in 0..problem.space.n_nodes() {
            g = g.max(problem.driver.growth_sup(t, problem.space.node(i), T::lit(r + 1.0)).as_f64());
        }
    }
    let mut n0 = 4usize;
    while (n0 as f64) < g && n0 < (1 << 20) {
        n0 *= 2;
    }
    (0..5).map(|k| n0 << k).collect()
}

/// Monotone-driver pipeline: gauge, truncate to `h_n`, mollify at scale `1/n`,
/// solve by Picard, and stop once successive solutions are Cauchy in `‖·‖_T`.
pub fn solve_monotone<T: Real>(
    problem: &SemilinearProblem<T>,
    settings: &MonotoneSettings,
) -> Result<(SpaceTimeField<T>, SolveReport)> {
    let gauged = gauge_transform(problem)?;
    let p = &gauged.problem;
    let disc = p.discretization()?;
    let (r, k_hat) = truncation_radius(p, &disc)?;
    let schedule = settings.schedule.clone().unwrap_or_else(|| default_schedule(p, r));
    if schedule.is_empty() || schedule.contains(&0) {
        return Err(Error::config("n-schedule must be nonempty with positive entries"));
    }
    let mut report = SolveReport {
        method: "monotone".into(),
        constants: SolveConstants {
            lipschitz_z: p.driver.meta().lipschitz_z.as_f64(),
            lipschitz_y: p.driver.meta().lipschitz_y.as_f64(),
            alpha: p.semigroup.drift_field().sector_alpha.as_f64(),
            r: Some(r),
            k_hat: Some(k_hat),
            n_schedule: schedule.clone(),
            ..Default::default()
        },
        ..Default::default()
    };
    let mut prev: Option<SpaceTimeField<T>> = None;
    for &n in &schedule {
        let nt = T::from_usize_lossy(n);
        let h = truncate_driver(p.driver.clone(), T::lit(r), nt)?;
        let hn = mollify_driver(h, nt)?;
        let sub = p.with_driver(hn)?;
        let (u, inner) = match picard_lipschitz(&sub, &settings.picard) {
            Ok(v) => v,
            Err(Error::Convergence { message, report: inner }) => {
                report.iterations += inner.iterations;
                return Err(Error::Convergence { message: format!("n = {n}: {message}"), report: Box::new(report) });
            }
            Err(e) => return Err(e),
        };
        report.iterations += inner.iterations;
        report.windows = inner.windows;
        report.window_length = inner.window_length;
        report.contraction_bound = inner.contraction_bound;
        report.constants.m_t_estimate = inner.constants.m_t_estimate;
        if let Some(old) = &prev {
            let gap = p.t_norm(&u.sub(old))?.as_f64();
            report.cauchy_gaps.push(gap);
            if gap <= settings.tol {
                report.converged = true;
                return Ok((gauged.invert(&u), report));
            }
        }
        prev = Some(u);
    }
    Err(Error::Convergence {
        message: format!("n-schedule {schedule:?} exhausted before the Cauchy gap fell below {}", settings.tol),
        report: Box::new(report),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{FnDriver, Preset, PresetDriver};

    fn ou_problem(
        driver: DriverRef<f64>,
        phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        steps: usize,
    ) -> SemilinearProblem<f64> {
        let sg = SemigroupSpec::ou(vec![-1.0], vec![1.0]).unwrap();
        let space = TruncatedSpace::build(1, &sg.invariant_variances(), 20).unwrap();
        SemilinearProblem::from_fn(space, sg, 1, move |x, o| o[0] = phi(x[0]), driver, 1.0, steps).unwrap()
    }

    fn zero() -> DriverRef<f64> {
        FnDriver::source(1, 1, 0.0, |_, _, o| o[0] = 0.0).into_ref()
    }

    fn minus_y() -> DriverRef<f64> {
        PresetDriver::new(Preset::Linear { a: -1.0, source: None }, 1, 1).unwrap().into_ref()
    }

    fn rel_l2(p: &SemilinearProblem<f64>, u: &SpaceTimeField<f64>, exact: impl Fn(f64, f64) -> f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (t, s) in u.times.iter().zip(&u.slices) {
            let e = p.space.sample_scalar(|x| exact(*t, x[0]));
            num += p.space.norm_sq(&s.zip_map(&e, |a, b| a - b));
            den += p.space.norm_sq(&e);
        }
        (num / den).sqrt()
    }

    #[test]
    fn linear_examples() {
        let p = ou_problem(zero(), |x| x, 64);
        let u = solve_linear(&p).unwrap();
        assert!(rel_l2(&p, &u, |t, x| (-(1.0 - t)).exp() * x) <= 1e-6);

        let p = ou_problem(zero(), |_| 2.5, 16);
        let u = solve_linear(&p).unwrap();
        assert!(u.slices.iter().all(|s| s.values.iter().all(|v| (v - 2.5).abs() < 1e-12)));

        let one = FnDriver::source(1, 1, 1.0, |_, _, o| o[0] = 1.0).into_ref();
        let p = ou_problem(one, |_| 0.0, 16);
        let u = solve_linear(&p).unwrap();
        for (t, s) in u.times.iter().zip(&u.slices) {
            assert!(s.values.iter().all(|v| (v - (1.0 - t)).abs() < 1e-12));
        }
        assert!(solve_linear(&ou_problem(minus_y(), |x| x, 8)).is_err());
    }

    #[test]
    fn picard_integrating_factor() {
        let p = ou_problem(minus_y(), |x| x, 128);
        let (u, rep) = picard_lipschitz(&p, &PicardSettings::default()).unwrap();
        assert!(rep.converged);
        assert!(rel_l2(&p, &u, |t, x| (-2.0 * (1.0 - t)).exp() * x) <= 1e-5);
    }

    #[test]
    fn picard_on_source_matches_linear() {
        let src = FnDriver::source(1, 1, 1.0, |t: f64, x: &[f64], o: &mut [f64]| o[0] = (x[0] + t).cos()).into_ref();
        let p = ou_problem(src, |x| x.tanh(), 32);
        let lin = solve_linear(&p).unwrap();
        let (u, _) = picard_lipschitz(&p, &PicardSettings::default()).unwrap();
        assert!(u.sub(&lin).sup_norm() < 1e-12);
    }

    #[test]
    fn zero_horizon_returns_terminal() {
        let sg = SemigroupSpec::ou(vec![-1.0], vec![1.0]).unwrap();
        let space: TruncatedSpace<f64> = TruncatedSpace::build(1, &sg.invariant_variances(), 8).unwrap();
        let terminal = space.sample_scalar(|x| x[0].sin());
        let p = SemilinearProblem::new(space, sg, terminal.clone(), minus_y(), 0.0, 4).unwrap();
        let (u, _) = picard_lipschitz(&p, &PicardSettings::default()).unwrap();
        assert!(u.slices.iter().all(|s| *s == terminal));
    }

    #[test]
    fn gauge_constant_rate() {
        let lin = PresetDriver::new(Preset::Linear { a: 0.5, source: None }, 1, 1).unwrap().into_ref();
        let p = ou_problem(lin, |x| x, 16);
        let g = gauge_transform(&p).unwrap();
        let k = 0.5f64.exp();
        for (a, b) in g.problem.terminal.values.iter().zip(&p.terminal.values) {
            assert!((a - k * b).abs() < 1e-15);
        }
        let id = gauge_transform(&ou_problem(minus_y(), |x| x, 16)).unwrap();
        assert!(id.alphas.iter().all(|&a| a == 0.0));
        let u = solve_linear(&ou_problem(zero(), |x| x, 16)).unwrap();
        let back = g.invert(&g.forward(&u));
        assert!(back.sub(&u).sup_norm() < 1e-12);
    }

    #[test]
    fn monotone_linear_matches_closed_form_and_picard() {
        let p = ou_problem(minus_y(), |x| x, 64);
        let (u, rep) = solve_monotone(&p, &MonotoneSettings::default()).unwrap();
        assert!(rep.converged);
        let (v, _) = picard_lipschitz(&p, &PicardSettings::default()).unwrap();
        assert!(p.t_norm(&u.sub(&v)).unwrap() <= 1e-5);
        assert!(rel_l2(&p, &u, |t, x| (-2.0 * (1.0 - t)).exp() * x) <= 1e-4);
    }

    #[test]
    fn monotone_schedule_exhaustion_is_reported() {
        let cubic = PresetDriver::new(Preset::Cubic { coef: 1.0 }, 1, 1).unwrap().into_ref();
        let p = ou_problem(cubic, |x| x.tanh(), 16);
        let s = MonotoneSettings { schedule: Some(vec![4, 8]), tol: 1e-14, ..Default::default() };
        match solve_monotone(&p, &s) {
            Err(Error::Convergence { report, .. }) => assert_eq!(report.cauchy_gaps.len(), 1),
            other => panic!("{:?}", other.map(|x| x.1)),
        }
    }
}
