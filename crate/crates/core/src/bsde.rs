//! Least-squares Monte Carlo for the backward equation
//! `Y_t = ξ + ∫_t^T f(s, X_s, Y_s, A^{1/2}Z_s) ds - ∫_t^T Z_s·dM_s`, the
//! martingale representation of terminal variables, and the cross-check
//! against mild solutions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{design, fit_design, PolyBasis, RegressionDiagnostics};
use crate::driver::DriverRef;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve};
use crate::paths::{PathEnsemble, Start};
use crate::space::{DiffusionCoefficient, SpaceTimeField, TruncatedSpace};
use crate::stats::Estimate;
use crate::Real;

/// Backward problem on `[s, T]` driven by an ensemble started at time `s`.
#[derive(Clone)]
pub struct BsdeProblem<'a, T: Real> {
    pub ensemble: &'a PathEnsemble<T>,
    /// `ξ` per path, `[path][comp]`.
    pub terminal: Vec<T>,
    pub comps: usize,
    pub driver: DriverRef<T>,
    pub diffusion: DiffusionCoefficient<T>,
    pub start_time: T,
}

impl<'a, T: Real> BsdeProblem<'a, T> {
    pub fn new(
        ensemble: &'a PathEnsemble<T>,
        terminal: Vec<T>,
        driver: DriverRef<T>,
        diffusion: DiffusionCoefficient<T>,
        start_time: T,
    ) -> Result<Self> {
        let comps = driver.comps();
        let mut problems = Vec::new();
        if terminal.len() != ensemble.paths * comps {
            problems.push(format!("{} terminal values for {} paths × {comps}", terminal.len(), ensemble.paths));
        }
        if driver.dim() != ensemble.dim {
            problems.push(format!("driver dim {} vs ensemble dim {}", driver.dim(), ensemble.dim));
        }
        if diffusion.dim() != ensemble.dim {
            problems.push(format!("diffusion dim {} vs ensemble dim {}", diffusion.dim(), ensemble.dim));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        if terminal.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("terminal variable has non-finite samples".into()));
        }
        Ok(BsdeProblem { ensemble, terminal, comps, driver, diffusion, start_time })
    }

    /// `ξ = φ(X_T)` for a closure `φ` with the driver's component count.
    pub fn from_terminal_fn(
        ensemble: &'a PathEnsemble<T>,
        phi: impl Fn(&[T], &mut [T]),
        driver: DriverRef<T>,
        diffusion: DiffusionCoefficient<T>,
        start_time: T,
    ) -> Result<Self> {
        let l = driver.comps();
        let mut terminal = vec![T::zero(); ensemble.paths * l];
        for (p, out) in terminal.chunks_mut(l).enumerate() {
            phi(ensemble.state(p, ensemble.steps), out);
        }
        Self::new(ensemble, terminal, driver, diffusion, start_time)
    }

    fn time(&self, k: usize) -> T {
        self.start_time + self.ensemble.time(k)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LsmcSettings {
    /// Total degree of the regression basis; `None` picks the default for the dimension.
    pub degree: Option<usize>,
    pub picard_iters: usize,
}

impl Default for LsmcSettings {
    fn default() -> Self {
        LsmcSettings { degree: None, picard_iters: 3 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub z: RegressionDiagnostics,
    pub y: RegressionDiagnostics,
}

#[derive(Debug, Clone)]
pub struct BsdeSolution<T> {
    pub paths: usize,
    pub steps: usize,
    pub comps: usize,
    pub dim: usize,
    /// `[path][node][comp]`, `steps + 1` nodes.
    y: Vec<T>,
    /// `[path][step][comp][axis]`.
    z: Vec<T>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub picard_iters: usize,
    /// `Y_0` (path average) per component, with the standard error of the
    /// plain estimator `ξ + Σ f Δt`.
    pub y0: Vec<Estimate>,
}

impl<T: Real> BsdeSolution<T> {
    pub fn y(&self, path: usize, node: usize) -> &[T] {
        let b = (path * (self.steps + 1) + node) * self.comps;
        &self.y[b..b + self.comps]
    }

    pub fn z(&self, path: usize, step: usize) -> &[T] {
        let w = self.comps * self.dim;
        let b = (path * self.steps + step) * w;
        &self.z[b..b + w]
    }
}

/// Conditional expectation of `ys` (`[path][comp]`) given `X_k`, evaluated
/// on every path. A point start makes `X_0` deterministic, so step 0 reduces
/// to plain averages.
fn conditional<T: Real>(
    ens: &PathEnsemble<T>,
    basis: Option<&(PolyBasis, Vec<f64>)>,
    ys: &[T],
    comps: usize,
) -> Result<(Vec<T>, RegressionDiagnostics)> {
    match basis {
        None => {
            let mut mean = vec![T::zero(); comps];
            for c in 0..comps {
                let col: Vec<T> = ys.iter().skip(c).step_by(comps).copied().collect();
                mean[c] = T::lit(Estimate::from_samples(&col).value);
            }
            let out = (0..ens.paths).flat_map(|_| mean.clone()).collect();
            Ok((out, RegressionDiagnostics { rows: ens.paths, condition: 1.0, ridge: 0.0 }))
        }
        Some((b, des)) => {
            let k = b.len();
            let fit = fit_design(k, des, ys, comps)?;
            let mut out = vec![T::zero(); ens.paths * comps];
            out.par_chunks_mut(comps).enumerate().for_each(|(p, o)| fit.predict_with(&des[p * k..(p + 1) * k], o));
            Ok((out, fit.diagnostics))
        }
    }
}

fn step_basis<T: Real>(ens: &PathEnsemble<T>, step: usize, degree: usize) -> Result<Option<(PolyBasis, Vec<f64>)>> {
    if step == 0 && matches!(ens.start, Start::Point(_)) {
        return Ok(None);
    }
    let xs = ens.states_at(step);
    let b = PolyBasis::fitted(degree, ens.dim, &xs)?;
    let des = design(&b, &xs);
    Ok(Some((b, des)))
}

/// `(2 A(x) Δt)^{-1} v` for every component row of `v` (`[comp][axis]`).
fn solve_bracket<T: Real>(a: &DiffusionCoefficient<T>, x: &[T], dt: T, v: &mut [T], comps: usize) -> Result<()> {
    let d = a.dim();
    let mut m = vec![T::zero(); d * d];
    a.matrix_at(x, &mut m);
    m.iter_mut().for_each(|e| *e *= T::lit(2.0) * dt);
    if !cholesky_in_place(&mut m, d) {
        return Err(Error::Numerical("diffusion matrix not positive definite on a path".into()));
    }
    for c in 0..comps {
        cholesky_solve(&m, d, &mut v[c * d..(c + 1) * d]);
    }
    Ok(())
}

/// Local Lipschitz constant of `y ↦ f` on the ball of radius `r`, from
/// difference quotients on a grid (or the declared constant when finite).
fn local_lipschitz_y<T: Real>(problem: &BsdeProblem<'_, T>, r: T) -> T {
    let meta = problem.driver.meta();
    if meta.lipschitz_y.is_finite() {
        return meta.lipschitz_y;
    }
    let l = problem.comps;
    let d = problem.ensemble.dim;
    let ens = problem.ensemble;
    let z = vec![T::zero(); l * d];
    let mut best = T::zero();
    let pts = 32usize;
    let mut y = vec![T::zero(); l];
    let mut y2 = vec![T::zero(); l];
    let mut f1 = vec![T::zero(); l];
    let mut f2 = vec![T::zero(); l];
    let probe = ens.paths.min(16);
    for k in [0, ens.steps] {
        for p in 0..probe {
            let x = ens.state(p * ens.paths / probe, k);
            let t = problem.time(k);
            for a in 0..l {
                for i in 0..pts {
                    y.iter_mut().for_each(|v| *v = T::zero());
                    y[a] = -r + T::lit(2.0) * r * T::from_usize_lossy(i) / T::from_usize_lossy(pts);
                    y2.copy_from_slice(&y);
                    let h = T::lit(2.0) * r / T::from_usize_lossy(pts);
                    y2[a] += h;
                    problem.driver.eval(t, x, &y, &z, &mut f1);
                    problem.driver.eval(t, x, &y2, &z, &mut f2);
                    let q = f1.iter().zip(&f2).map(|(u, v)| (*u - *v) * (*u - *v)).sum::<T>().sqrt() / h;
                    best = best.max(q);
                }
            }
        }
    }
    best
}

/// Backward induction with regression on the polynomial basis. The implicit
/// driver term is resolved by `picard_iters` sweeps per time step.
pub fn lsmc_solve<T: Real>(problem: &BsdeProblem<'_, T>, settings: &LsmcSettings) -> Result<BsdeSolution<T>> {
    let ens = problem.ensemble;
    let (m, n, l, d) = (ens.paths, ens.steps, problem.comps, ens.dim);
    if settings.picard_iters == 0 {
        return Err(Error::config("picard_iters must be at least 1"));
    }
    let degree = settings.degree.unwrap_or_else(|| PolyBasis::default_degree(d));
    let dt = ens.dt;
    let xi_sup = problem.terminal.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    let reach = xi_sup + problem.driver.meta().f0_bound * ens.horizon + T::one();
    let lip = local_lipschitz_y(problem, reach);
    if !(dt * lip < T::lit(0.5)) {
        return Err(Error::Config(vec![format!(
            "Δt·C_y = {} must stay below 1/2 for the implicit driver sweeps",
            (dt * lip).as_f64()
        )]));
    }

    let mut y = vec![T::zero(); m * (n + 1) * l];
    let mut z = vec![T::zero(); m * n * l * d];
    for p in 0..m {
        let b = (p * (n + 1) + n) * l;
        y[b..b + l].copy_from_slice(&problem.terminal[p * l..(p + 1) * l]);
    }
    let mut diagnostics = Vec::with_capacity(n);
    let mut next: Vec<T> = problem.terminal.clone();
    for k in (0..n).rev() {
        let t = problem.time(k);
        let basis = step_basis(ens, k, degree)?;
        // Z_k = (2AΔt)^{-1} E[Y_{k+1} ΔM_k^T | X_k]
        let mut prod = vec![T::zero(); m * l * d];
        for p in 0..m {
            let dm = ens.increment(p, k);
            for c in 0..l {
                for a in 0..d {
                    prod[(p * l + c) * d + a] = next[p * l + c] * dm[a];
                }
            }
        }
        let (mut zk, zdiag) = conditional(ens, basis.as_ref(), &prod, l * d)?;
        zk.par_chunks_mut(l * d)
            .enumerate()
            .try_for_each(|(p, v)| solve_bracket(&problem.diffusion, ens.state(p, k), dt, v, l))?;
        let (cond, ydiag) = conditional(ens, basis.as_ref(), &next, l)?;
        // implicit sweeps Y = E[Y_{k+1}|X_k] + Δt f(t_k, X_k, Y, A^{1/2}Z)
        let mut yk = cond.clone();
        let cond = &cond;
        for _ in 0..settings.picard_iters {
            yk = (0..m)
                .into_par_iter()
                .flat_map_iter(|p| {
                    let x = ens.state(p, k);
                    let mut sz = vec![T::zero(); l * d];
                    let mut s = vec![T::zero(); d * d];
                    problem.diffusion.sqrt_at(x, &mut s);
                    for c in 0..l {
                        crate::space::apply_rows(
                            &s,
                            d,
                            &zk[(p * l + c) * d..(p * l + c + 1) * d],
                            &mut sz[c * d..(c + 1) * d],
                        );
                    }
                    let mut f = vec![T::zero(); l];
                    problem.driver.eval(t, x, &yk[p * l..(p + 1) * l], &sz, &mut f);
                    (0..l).map(move |c| cond[p * l + c] + dt * f[c]).collect::<Vec<_>>()
                })
                .collect();
        }
        for p in 0..m {
            let b = (p * (n + 1) + k) * l;
            y[b..b + l].copy_from_slice(&yk[p * l..(p + 1) * l]);
            let bz = (p * n + k) * l * d;
            z[bz..bz + l * d].copy_from_slice(&zk[p * l * d..(p + 1) * l * d]);
        }
        diagnostics.push(StepDiagnostics { step: k, z: zdiag, y: ydiag });
        next = yk;
    }
    diagnostics.reverse();

    let mut sol = BsdeSolution {
        paths: m,
        steps: n,
        comps: l,
        dim: d,
        y,
        z,
        diagnostics,
        picard_iters: settings.picard_iters,
        y0: Vec::new(),
    };
    sol.y0 = y0_estimates(problem, &sol);
    Ok(sol)
}

/// Driver along the solution at `(path, step)`.
fn driver_on_path<T: Real>(problem: &BsdeProblem<'_, T>, sol: &BsdeSolution<T>, p: usize, k: usize, out: &mut [T]) {
    let ens = problem.ensemble;
    let (l, d) = (sol.comps, sol.dim);
    let x = ens.state(p, k);
    let mut s = vec![T::zero(); d * d];
    problem.diffusion.sqrt_at(x, &mut s);
    let mut sz = vec![T::zero(); l * d];
    let zp = sol.z(p, k);
    for c in 0..l {
        crate::space::apply_rows(&s, d, &zp[c * d..(c + 1) * d], &mut sz[c * d..(c + 1) * d]);
    }
    problem.driver.eval(problem.time(k), x, sol.y(p, k), &sz, out);
}

/// Per path `ξ + Σ_k f(t_k, X_k, Y_k, A^{1/2}Z_k) Δt`, laid out `[path][comp]`.
/// Their mean is `Y_0` under a point start.
pub fn y0_samples<T: Real>(problem: &BsdeProblem<'_, T>, sol: &BsdeSolution<T>) -> Vec<T> {
    let l = sol.comps;
    let dt = problem.ensemble.dt;
    (0..sol.paths)
        .into_par_iter()
        .flat_map_iter(|p| {
            let mut acc = problem.terminal[p * l..(p + 1) * l].to_vec();
            let mut f = vec![T::zero(); l];
            for k in 0..sol.steps {
                driver_on_path(problem, sol, p, k, &mut f);
                for c in 0..l {
                    acc[c] += dt * f[c];
                }
            }
            acc
        })
        .collect()
}

fn y0_estimates<T: Real>(problem: &BsdeProblem<'_, T>, sol: &BsdeSolution<T>) -> Vec<Estimate> {
    let l = sol.comps;
    let plain = y0_samples(problem, sol);
    (0..l)
        .map(|c| {
            let y0: Vec<T> = (0..sol.paths).map(|p| sol.y(p, 0)[c]).collect();
            let col: Vec<T> = plain.iter().skip(c).step_by(l).copied().collect();
            Estimate { value: Estimate::from_samples(&y0).value, se: Estimate::from_samples(&col).se }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Representation {
    /// `E(ξ | F_0)` averaged over paths.
    pub mean: Estimate,
    /// Path average of `R = ξ - E(ξ|F_0) - Σ φ·ΔM`; the SE includes the
    /// sampling error of the fitted `E(ξ|F_0)`.
    pub residual: Estimate,
    /// `sqrt(E R²)`.
    pub residual_rms: f64,
    /// `E Σ ⟨A φ, φ⟩ Δt`; the SE comes from batch means.
    pub energy: Estimate,
    /// `½ E ξ²`.
    pub half_second_moment: Estimate,
    /// `energy - ½ E ξ²` with a batch-means SE.
    pub gap: Estimate,
}

/// Integrand `φ_k(X_k)` with `ξ ≈ E(ξ|F_0) + Σ φ_k·ΔM_k`, `[path][step][axis]`.
pub fn representation_integrand<T: Real>(
    xi: &[T],
    ens: &PathEnsemble<T>,
    a: &DiffusionCoefficient<T>,
    degree: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    let (m, n, d) = (ens.paths, ens.steps, ens.dim);
    if xi.len() != m {
        return Err(Error::Shape(format!("{} samples of ξ for {m} paths", xi.len())));
    }
    let mut phi = vec![T::zero(); m * n * d];
    let mut next = xi.to_vec();
    for k in (0..n).rev() {
        let basis = step_basis(ens, k, degree)?;
        let prod: Vec<T> =
            (0..m).flat_map(|p| ens.increment(p, k).iter().map(|v| *v * next[p]).collect::<Vec<_>>()).collect();
        let (mut pk, _) = conditional(ens, basis.as_ref(), &prod, d)?;
        pk.par_chunks_mut(d).enumerate().try_for_each(|(p, v)| solve_bracket(a, ens.state(p, k), ens.dt, v, 1))?;
        for p in 0..m {
            phi[(p * n + k) * d..(p * n + k + 1) * d].copy_from_slice(&pk[p * d..(p + 1) * d]);
        }
        next = conditional(ens, basis.as_ref(), &next, 1)?.0;
    }
    Ok((phi, next))
}

const BATCHES: usize = 20;

/// Martingale representation of a scalar terminal variable by regression.
pub fn represent<T: Real>(
    xi: &[T],
    ens: &PathEnsemble<T>,
    a: &DiffusionCoefficient<T>,
    degree: usize,
) -> Result<Representation> {
    let (m, n, d) = (ens.paths, ens.steps, ens.dim);
    let (phi, v0) = representation_integrand(xi, ens, a, degree)?;
    let energy_path = |p: usize, phi: &[T], ens: &PathEnsemble<T>| -> T {
        let mut mat = vec![T::zero(); d * d];
        let mut av = vec![T::zero(); d];
        (0..ens.steps).fold(T::zero(), |acc, k| {
            let f = &phi[(p * ens.steps + k) * d..(p * ens.steps + k + 1) * d];
            a.matrix_at(ens.state(p, k), &mut mat);
            crate::space::apply_rows(&mat, d, f, &mut av);
            acc + crate::scalar::dot(&av, f) * ens.dt
        })
    };
    let residuals: Vec<T> = (0..m)
        .map(|p| {
            let stoch = (0..n).fold(T::zero(), |acc, k| {
                acc + crate::scalar::dot(&phi[(p * n + k) * d..(p * n + k + 1) * d], ens.increment(p, k))
            });
            xi[p] - v0[p] - stoch
        })
        .collect();
    let energies: Vec<T> = (0..m).map(|p| energy_path(p, &phi, ens)).collect();
    let halves: Vec<T> = xi.iter().map(|v| T::lit(0.5) * *v * *v).collect();
    let energy = Estimate::from_samples(&energies);
    let half = Estimate::from_samples(&halves);

    // batch means: refit on disjoint blocks of paths
    let batches = BATCHES.min(m / 2).max(1);
    let size = m / batches;
    let gaps: Vec<f64> = (0..batches)
        .map(|b| {
            let sub = ens.subset(b * size, size);
            let (phi_b, _) = representation_integrand(&xi[b * size..(b + 1) * size], &sub, a, degree)?;
            let e = (0..size).map(|p| energy_path(p, &phi_b, &sub).as_f64()).sum::<f64>() / size as f64;
            let h = halves[b * size..(b + 1) * size].iter().map(|v| v.as_f64()).sum::<f64>() / size as f64;
            Ok((e, e - h))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?
        .into_iter()
        .map(|(_, g)| g)
        .collect();
    let batch = Estimate::from_samples(&gaps);
    let energy_batches: Vec<f64> = gaps
        .iter()
        .zip(0..)
        .map(|(g, b)| g + halves[b * size..(b + 1) * size].iter().map(|v| v.as_f64()).sum::<f64>() / size as f64)
        .collect();
    let energy_se = Estimate::from_samples(&energy_batches).se;
    // E(ξ|F_0) is fitted on the same paths, so its sampling error enters the mean of R
    let r = Estimate::from_samples(&residuals);
    let residual = Estimate { value: r.value, se: r.se.hypot(Estimate::from_samples(xi).se) };
    let rms = (residuals.iter().map(|r| r.as_f64().powi(2)).sum::<f64>() / m as f64).sqrt();
    Ok(Representation {
        mean: Estimate::from_samples(&v0),
        residual,
        residual_rms: rms,
        energy: Estimate { value: energy.value, se: energy_se.max(energy.se) },
        half_second_moment: half,
        gap: Estimate { value: energy.value - half.value, se: batch.se },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeynmanKacReport {
    pub y0: Estimate,
    /// `u(0, X_0)` averaged over paths.
    pub u0: f64,
    pub y0_gap: f64,
    /// Per time node, RMS over paths of `|Y_k - u(t_k, X_k)|`.
    pub y_rms: Vec<f64>,
    /// Per step, RMS over paths of `|A^{1/2}Z_k - A^{1/2}∇u(t_k, X_k)|`.
    pub z_rms: Vec<f64>,
    /// `u(0, X_0) - E[φ(X_T) + ∫ f(t, X_t, u, A^{1/2}∇u) dt]` by Monte Carlo.
    pub mild_identity: Estimate,
}

/// Compare a mild solution `u` on `space` with a BSDE solution on the same
/// data. `u` must share the ensemble's time step; the ensemble may start at
/// any node of `u`'s grid.
pub fn feynman_kac_residual<T: Real>(
    u: &SpaceTimeField<T>,
    space: &TruncatedSpace<T>,
    sol: &BsdeSolution<T>,
    problem: &BsdeProblem<'_, T>,
) -> Result<FeynmanKacReport> {
    let ens = problem.ensemble;
    let (l, d, n) = (sol.comps, sol.dim, sol.steps);
    if u.comps() != l || space.dim() != d {
        return Err(Error::Shape("u and BSDE solution disagree in shape".into()));
    }
    let du = u.dt();
    if (du - ens.dt).abs() > T::lit(1e-9) * du.max(T::one()) {
        return Err(Error::Shape("u and ensemble time steps differ".into()));
    }
    let offset = (problem.start_time / du).round().to_usize().unwrap_or(usize::MAX);
    if offset + n != u.steps() {
        return Err(Error::Shape(format!("ensemble covers {n} steps from node {offset}, u has {}", u.steps())));
    }
    let grads: Vec<Vec<T>> = u.slices.iter().map(|s| space.gradient(s).map(|g| g.values)).collect::<Result<_>>()?;
    let dt = ens.dt;
    let half = T::lit(0.5);
    struct PathStats {
        u0: f64,
        y_sq: Vec<f64>,
        z_sq: Vec<f64>,
        rhs: f64,
    }
    let stats: Vec<PathStats> = (0..sol.paths)
        .into_par_iter()
        .map(|p| {
            let mut uv = vec![T::zero(); l];
            let mut g = vec![T::zero(); l * d];
            let mut s = vec![T::zero(); d * d];
            let mut sg = vec![T::zero(); l * d];
            let mut sz = vec![T::zero(); l * d];
            let mut f = vec![T::zero(); l];
            let mut y_sq = Vec::with_capacity(n + 1);
            let mut z_sq = Vec::with_capacity(n);
            let mut rhs = problem.terminal[p * l].as_f64();
            let mut u0 = 0.0;
            for k in 0..=n {
                let x = ens.state(p, k);
                let rows = space.cardinal_rows(x);
                space.interpolate_with_rows(&u.slices[offset + k].values, l, &rows, &mut uv);
                if k == 0 {
                    u0 = uv[0].as_f64();
                }
                let yk = sol.y(p, k);
                y_sq.push(uv.iter().zip(yk).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum());
                space.interpolate_with_rows(&grads[offset + k], l * d, &rows, &mut g);
                problem.diffusion.sqrt_at(x, &mut s);
                for c in 0..l {
                    crate::space::apply_rows(&s, d, &g[c * d..(c + 1) * d], &mut sg[c * d..(c + 1) * d]);
                }
                if k < n {
                    let zk = sol.z(p, k);
                    for c in 0..l {
                        crate::space::apply_rows(&s, d, &zk[c * d..(c + 1) * d], &mut sz[c * d..(c + 1) * d]);
                    }
                    z_sq.push(sg.iter().zip(&sz).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum());
                }
                problem.driver.eval(problem.time(k), x, &uv, &sg, &mut f);
                let w = if k == 0 || k == n { half } else { T::one() };
                rhs += (w * dt * f[0]).as_f64();
            }
            PathStats { u0, y_sq, z_sq, rhs }
        })
        .collect();
    let m = sol.paths as f64;
    let u0 = stats.iter().map(|s| s.u0).sum::<f64>() / m;
    let y_rms = (0..=n).map(|k| (stats.iter().map(|s| s.y_sq[k]).sum::<f64>() / m).sqrt()).collect();
    let z_rms = (0..n).map(|k| (stats.iter().map(|s| s.z_sq[k]).sum::<f64>() / m).sqrt()).collect();
    let diffs: Vec<f64> = stats.iter().map(|s| s.u0 - s.rhs).collect();
    let y0 = sol.y0[0];
    Ok(FeynmanKacReport {
        y0,
        u0,
        y0_gap: (y0.value - u0).abs(),
        y_rms,
        z_rms,
        mild_identity: Estimate::from_samples(&diffs),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    pub p: f64,
    /// `E(sup_t |Y_t|^p + (∫ |A^{1/2}Z|² dt)^{p/2})`.
    pub lhs: Estimate,
    /// `E(|ξ|^p + (∫ |f⁰| dt)^p)`.
    pub rhs: Estimate,
    pub ratio: f64,
    pub sup_y: f64,
    /// `sup |Y| / (‖ξ‖_∞ + ‖f⁰‖_∞ T)` over the ensemble.
    pub linf_ratio: f64,
}

pub fn moment_report<T: Real>(sol: &BsdeSolution<T>, problem: &BsdeProblem<'_, T>, p: f64) -> Result<MomentReport> {
    if !(p > 1.0) {
        return Err(Error::Domain(format!("moment order {p} must exceed 1")));
    }
    let ens = problem.ensemble;
    let (l, d, n) = (sol.comps, sol.dim, sol.steps);
    let dt = ens.dt;
    let rows: Vec<(f64, f64, f64, f64, f64)> = (0..sol.paths)
        .into_par_iter()
        .map(|q| {
            let mut sup = 0.0f64;
            for k in 0..=n {
                sup = sup.max(crate::scalar::norm2(sol.y(q, k)).as_f64());
            }
            let mut s = vec![T::zero(); d * d];
            let mut sz = vec![T::zero(); d];
            let mut f0 = vec![T::zero(); l];
            let mut zint = 0.0f64;
            let mut f0int = 0.0f64;
            let mut f0sup = 0.0f64;
            for k in 0..n {
                let x = ens.state(q, k);
                problem.diffusion.sqrt_at(x, &mut s);
                let zk = sol.z(q, k);
                for c in 0..l {
                    crate::space::apply_rows(&s, d, &zk[c * d..(c + 1) * d], &mut sz);
                    zint += crate::scalar::dot(&sz, &sz).as_f64() * dt.as_f64();
                }
                problem.driver.f0(problem.time(k), x, &mut f0);
                let nf = crate::scalar::norm2(&f0).as_f64();
                f0int += nf * dt.as_f64();
                f0sup = f0sup.max(nf);
            }
            let xi = crate::scalar::norm2(&problem.terminal[q * l..(q + 1) * l]).as_f64();
            (sup.powf(p) + zint.powf(p / 2.0), xi.powf(p) + f0int.powf(p), sup, xi, f0sup)
        })
        .collect();
    let lhs = Estimate::from_samples(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
    let rhs = Estimate::from_samples(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let sup_y = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    let xi_sup = rows.iter().map(|r| r.3).fold(0.0, f64::max);
    let f0_sup = rows.iter().map(|r| r.4).fold(0.0, f64::max);
    let data = xi_sup + f0_sup * ens.horizon.as_f64();
    let ratio = if rhs.value > 0.0 {
        lhs.value / rhs.value
    } else if lhs.value == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let linf_ratio = if data > 0.0 {
        sup_y / data
    } else if sup_y == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(MomentReport { p, lhs, rhs, ratio, sup_y, linf_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{FnDriver, Preset, PresetDriver};
    use crate::mild::{picard_lipschitz, PicardSettings, SemilinearProblem};
    use crate::paths::{sample, PathConfig, Scheme};
    use crate::semigroup::SemigroupSpec;

    fn ou() -> SemigroupSpec<f64> {
        SemigroupSpec::ou(vec![-1.0], vec![1.0]).unwrap()
    }

    fn ensemble(x0: f64, steps: usize, paths: usize) -> PathEnsemble<f64> {
        let cfg =
            PathConfig { start: Start::Point(vec![x0]), horizon: 1.0, steps, paths, seed: 5, scheme: Scheme::Auto };
        sample(&ou(), &cfg).unwrap()
    }

    fn minus_y() -> DriverRef<f64> {
        PresetDriver::new(Preset::Linear { a: -1.0, source: None }, 1, 1).unwrap().into_ref()
    }

    #[test]
    fn linear_driver_matches_closed_form() {
        let ens = ensemble(1.0, 64, 20_000);
        let prob =
            BsdeProblem::from_terminal_fn(&ens, |x, o| o[0] = x[0], minus_y(), ou().diffusion().unwrap(), 0.0).unwrap();
        let sol = lsmc_solve(&prob, &LsmcSettings::default()).unwrap();
        let exact = (-2.0f64).exp();
        let y0 = sol.y0[0];
        assert!((y0.value - exact).abs() < (3.0 * y0.se).max(0.01 * exact), "{y0:?} vs {exact}");
        // Z tracks the gradient e^{-2(T-t)} at an interior step
        let k = ens.steps / 2;
        let g = (-2.0 * (1.0 - ens.time(k))).exp();
        let mean_z = (0..ens.paths).map(|p| sol.z(p, k)[0]).sum::<f64>() / ens.paths as f64;
        assert!((mean_z - g).abs() < 0.05 * g, "{mean_z} vs {g}");
    }

    #[test]
    fn zero_driver_gives_conditional_expectation() {
        let ens = ensemble(0.5, 8, 10_000);
        let zero = FnDriver::source(1, 1, 0.0, |_, _, o| o[0] = 0.0).into_ref();
        let prob =
            BsdeProblem::from_terminal_fn(&ens, |x, o| o[0] = x[0], zero, ou().diffusion().unwrap(), 0.0).unwrap();
        let sol = lsmc_solve(&prob, &LsmcSettings::default()).unwrap();
        let k = 4;
        let decay = (-(1.0 - ens.time(k))).exp();
        let err = (0..ens.paths).map(|p| (sol.y(p, k)[0] - decay * ens.state(p, k)[0]).powi(2)).sum::<f64>()
            / ens.paths as f64;
        assert!(err.sqrt() < 1e-2, "{err}");
    }

    #[test]
    fn shape_errors_are_collected() {
        let ens = ensemble(0.0, 4, 10);
        match BsdeProblem::new(&ens, vec![0.0; 3], minus_y(), ou().diffusion().unwrap(), 0.0) {
            Err(Error::Config(v)) => assert_eq!(v.len(), 1),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn step_too_coarse_for_the_driver_is_rejected() {
        let ens = ensemble(0.0, 2, 100);
        let steep = PresetDriver::new(Preset::Linear { a: -3.0, source: None }, 1, 1).unwrap().into_ref();
        let prob =
            BsdeProblem::from_terminal_fn(&ens, |x, o| o[0] = x[0], steep, ou().diffusion().unwrap(), 0.0).unwrap();
        assert!(matches!(lsmc_solve(&prob, &LsmcSettings::default()), Err(Error::Config(_))));
    }

    #[test]
    fn representation_of_terminal_state_is_sharp() {
        let ens = ensemble(0.0, 32, 20_000);
        let xi: Vec<f64> = (0..ens.paths).map(|p| ens.state(p, ens.steps)[0]).collect();
        let rep = represent(&xi, &ens, &ou().diffusion().unwrap(), 4).unwrap();
        assert!(rep.residual.within(0.0, 3.0), "{:?}", rep.residual);
        assert!(rep.gap.within(0.0, 3.0), "{:?}", rep.gap);
        let cos: Vec<f64> = xi.iter().map(|x| x.cos()).collect();
        let rep = represent(&cos, &ens, &ou().diffusion().unwrap(), 4).unwrap();
        assert!(rep.gap.value <= 3.0 * rep.gap.se);
    }

    #[test]
    fn agrees_with_mild_solution() {
        let sg = ou();
        let space = crate::space::TruncatedSpace::build(1, &sg.invariant_variances(), 20).unwrap();
        let problem =
            SemilinearProblem::from_fn(space.clone(), sg.clone(), 1, |x, o| o[0] = x[0], minus_y(), 1.0, 16).unwrap();
        let (u, _) = picard_lipschitz(&problem, &PicardSettings::default()).unwrap();
        let ens = ensemble(0.8, 16, 20_000);
        let prob =
            BsdeProblem::from_terminal_fn(&ens, |x, o| o[0] = x[0], minus_y(), sg.diffusion().unwrap(), 0.0).unwrap();
        let sol = lsmc_solve(&prob, &LsmcSettings::default()).unwrap();
        let fk = feynman_kac_residual(&u, &space, &sol, &prob).unwrap();
        assert!(fk.y0_gap < (3.0 * fk.y0.se).max(0.02 * fk.u0.abs()), "{fk:?}");
        assert!(fk.y_rms.iter().all(|r| *r < 0.02), "{:?}", fk.y_rms);
        let m = moment_report(&sol, &prob, 2.0).unwrap();
        assert!(m.ratio.is_finite() && m.ratio > 0.0);
        assert!(moment_report(&sol, &prob, 1.0).is_err());
    }
}
