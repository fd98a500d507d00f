//! Transition semigroups: the exact Ornstein–Uhlenbeck kernel and a Monte
//! Carlo Euler kernel for dissipatively perturbed drifts.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::quadrature::gauss_hermite;
use crate::rng::{self, salt};
use crate::space::{DiffusionCoefficient, DriftField, Field, TruncatedSpace};
use crate::stats::Estimate;
use crate::Real;

type VecFn<T> = Arc<dyn Fn(&[T], &mut [T]) + Send + Sync>;

/// Nonlinear part `F` of the drift `A₁x + F(x)`.
#[derive(Clone)]
pub enum Perturbation<T> {
    None,
    /// `F_k(x) = -x_k³ / (1 + x_k²)` on every axis (Lipschitz constant 9/8).
    Dissipative,
    Custom {
        f: VecFn<T>,
        lipschitz: T,
    },
}

impl<T: Real> Perturbation<T> {
    pub fn eval(&self, x: &[T], out: &mut [T]) {
        match self {
            Perturbation::None => out.iter_mut().for_each(|o| *o = T::zero()),
            Perturbation::Dissipative => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = -v * v * v / (T::one() + v * v);
                }
            }
            Perturbation::Custom { f, .. } => f(x, out),
        }
    }

    pub fn lipschitz(&self) -> T {
        match self {
            Perturbation::None => T::zero(),
            Perturbation::Dissipative => T::lit(1.125),
            Perturbation::Custom { lipschitz, .. } => *lipschitz,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Perturbation::None)
    }
}

impl<T: std::fmt::Debug> std::fmt::Debug for Perturbation<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Perturbation::None => write!(f, "None"),
            Perturbation::Dissipative => write!(f, "Dissipative"),
            Perturbation::Custom { lipschitz, .. } => write!(f, "Custom(lipschitz={lipschitz:?})"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum SemigroupKind<T> {
    OuAnalytic,
    McEuler { perturbation: Perturbation<T>, steps_per_unit: usize, paths: usize, seed: u64 },
}

/// Generator `½ Σ C_k ∂_k² + Σ (λ_k x_k + F_k(x)) ∂_k` with diagonal `C` and `A₁`.
#[derive(Debug, Clone)]
pub struct SemigroupSpec<T> {
    pub kind: SemigroupKind<T>,
    pub lambdas: Vec<T>,
    pub noise: Vec<T>,
}

impl<T: Real> SemigroupSpec<T> {
    pub fn ou(lambdas: Vec<T>, noise: Vec<T>) -> Result<Self> {
        validate_linear(&lambdas, &noise)?;
        Ok(SemigroupSpec { kind: SemigroupKind::OuAnalytic, lambdas, noise })
    }

    pub fn mc_euler(
        lambdas: Vec<T>,
        noise: Vec<T>,
        perturbation: Perturbation<T>,
        steps_per_unit: usize,
        paths: usize,
        seed: u64,
    ) -> Result<Self> {
        validate_linear(&lambdas, &noise)?;
        let mut problems = Vec::new();
        if steps_per_unit == 0 {
            problems.push("steps_per_unit must be positive".to_string());
        }
        if paths < 2 {
            problems.push("mc_euler needs at least 2 paths".to_string());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let worst = dissipativity_margin(&perturbation, lambdas.len(), seed);
        if worst > 1e-10 {
            return Err(Error::Precondition(format!(
                "perturbation is not dissipative: <F(x)-F(y), x-y> reached {worst:e}"
            )));
        }
        Ok(SemigroupSpec { kind: SemigroupKind::McEuler { perturbation, steps_per_unit, paths, seed }, lambdas, noise })
    }

    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self.kind, SemigroupKind::OuAnalytic)
    }

    /// Invariant variances `-C_k / (2 λ_k)` of the linear part.
    pub fn invariant_variances(&self) -> Vec<T> {
        self.lambdas.iter().zip(&self.noise).map(|(&l, &c)| -c / (T::lit(2.0) * l)).collect()
    }

    /// `A = C / 2`, so that `σσ* = 2A` with `σ = C^{1/2}`.
    pub fn diffusion(&self) -> Result<DiffusionCoefficient<T>> {
        DiffusionCoefficient::constant_diagonal(self.noise.iter().map(|&c| c * T::lit(0.5)).collect())
    }

    /// Drift of the non-symmetric part relative to the Gaussian reference
    /// measure: `A b = -F`, together with a valid sector constant.
    pub fn drift_field(&self) -> DriftField<T> {
        match &self.kind {
            SemigroupKind::OuAnalytic => DriftField::zero(self.dim()),
            SemigroupKind::McEuler { perturbation, .. } if perturbation.is_none() => DriftField::zero(self.dim()),
            SemigroupKind::McEuler { perturbation, .. } => {
                let p = perturbation.clone();
                let a: Vec<T> = self.noise.iter().map(|&c| c * T::lit(0.5)).collect();
                let alpha = perturbation.lipschitz() * T::from_usize_lossy(self.dim());
                DriftField::from_fn(self.dim(), alpha, move |x, out| {
                    p.eval(x, out);
                    for (o, &ak) in out.iter_mut().zip(&a) {
                        *o = -*o / ak;
                    }
                })
            }
        }
    }

    /// Per-axis OU variance `Q_t = -C (1 - e^{2λt}) / (2λ)`.
    pub fn q_t(&self, t: T) -> Vec<T> {
        self.lambdas
            .iter()
            .zip(&self.noise)
            .map(|(&l, &c)| c * (T::lit(2.0) * l * t).exp_m1() / (T::lit(2.0) * l))
            .collect()
    }

    fn check(&self, space: &TruncatedSpace<T>, t: T) -> Result<()> {
        if space.dim() != self.dim() {
            return Err(Error::Shape(format!("semigroup dim {} vs space dim {}", self.dim(), space.dim())));
        }
        if !(t >= T::zero()) {
            return Err(Error::Domain(format!("negative time {t}")));
        }
        Ok(())
    }

    /// Kernel of `P_t` acting on nodal values.
    pub fn kernel(&self, space: &TruncatedSpace<T>, t: T) -> Result<Kernel<T>> {
        self.check(space, t)?;
        if t == T::zero() {
            return Ok(Kernel::Identity);
        }
        Ok(match &self.kind {
            SemigroupKind::OuAnalytic => self.ou_kernel(space, t),
            SemigroupKind::McEuler { .. } => {
                let (steps, _) = self.mc_steps(t);
                let ens = self.simulate(space, t, steps, &[steps], self.mc_seed())?;
                Kernel::Dense(ens.dense_kernel(space, 0))
            }
        })
    }

    /// Kernels of `P_{k dt}` for `k = 0..=n`.
    pub fn lag_kernels(&self, space: &TruncatedSpace<T>, dt: T, n: usize) -> Result<Vec<Kernel<T>>> {
        self.check(space, dt)?;
        match &self.kind {
            SemigroupKind::OuAnalytic => {
                let mut out = vec![Kernel::Identity];
                for k in 1..=n {
                    out.push(self.ou_kernel(space, dt * T::from_usize_lossy(k)));
                }
                Ok(out)
            }
            SemigroupKind::McEuler { steps_per_unit, .. } => {
                if n == 0 || dt == T::zero() {
                    return Ok(vec![Kernel::Identity; n + 1]);
                }
                let per = ((dt.as_f64() * *steps_per_unit as f64).ceil() as usize).max(1);
                let records: Vec<usize> = (1..=n).map(|k| k * per).collect();
                let horizon = dt * T::from_usize_lossy(n);
                let ens = self.simulate(space, horizon, n * per, &records, self.mc_seed())?;
                let mut out = vec![Kernel::Identity];
                out.extend(
                    (0..n).into_par_iter().map(|r| Kernel::Dense(ens.dense_kernel(space, r))).collect::<Vec<_>>(),
                );
                Ok(out)
            }
        }
    }

    /// `P_t` applied to a grid field through its tensor interpolant.
    pub fn apply(&self, space: &TruncatedSpace<T>, t: T, field: &Field<T>) -> Result<Field<T>> {
        space.check_field(field)?;
        Ok(self.kernel(space, t)?.apply(space, field))
    }

    /// `P_t f` at every node for a closure `f`, by per-node Gauss–Hermite
    /// quadrature (analytic) or a path average (Monte Carlo).
    pub fn apply_fn<F>(&self, space: &TruncatedSpace<T>, t: T, f: F) -> Result<Applied>
    where
        F: Fn(&[T]) -> T + Sync,
    {
        self.check(space, t)?;
        let d = self.dim();
        let n = space.n_nodes();
        if t == T::zero() {
            let values: Vec<f64> = (0..n).map(|i| f(space.node(i)).as_f64()).collect();
            let sup = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Ok(Applied { se: vec![0.0; n], values, evaluated_sup: sup });
        }
        match &self.kind {
            SemigroupKind::OuAnalytic => {
                let q = space.quad_order();
                let rule = gauss_hermite::<T>(q);
                let qt = self.q_t(t);
                let decay: Vec<T> = self.lambdas.iter().map(|&l| (l * t).exp()).collect();
                let sd: Vec<T> = qt.iter().map(|v| v.sqrt()).collect();
                let inner = q.pow(d as u32);
                let rows: Vec<(f64, f64)> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let x = space.node(i);
                        let mut y = vec![T::zero(); d];
                        let mut acc = T::zero();
                        let mut sup = 0.0f64;
                        for m in 0..inner {
                            let mut rem = m;
                            let mut w = T::one();
                            for a in (0..d).rev() {
                                let k = rem % q;
                                rem /= q;
                                y[a] = decay[a] * x[a] + sd[a] * rule.nodes[k];
                                w *= rule.weights[k];
                            }
                            let v = f(&y);
                            sup = sup.max(v.as_f64().abs());
                            acc += w * v;
                        }
                        (acc.as_f64(), sup)
                    })
                    .collect();
                let grid_sup = (0..n).map(|i| f(space.node(i)).as_f64().abs()).fold(0.0, f64::max);
                let sup = rows.iter().fold(grid_sup, |m, r| m.max(r.1));
                Ok(Applied { values: rows.iter().map(|r| r.0).collect(), se: vec![0.0; n], evaluated_sup: sup })
            }
            SemigroupKind::McEuler { .. } => {
                let (steps, _) = self.mc_steps(t);
                let ens = self.simulate(space, t, steps, &[steps], self.mc_seed())?;
                let rows: Vec<(Estimate, f64)> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let vals: Vec<T> = (0..ens.paths).map(|p| f(ens.point(i, p, 0))).collect();
                        let sup = vals.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
                        (Estimate::from_samples(&vals), sup)
                    })
                    .collect();
                let grid_sup = (0..n).map(|i| f(space.node(i)).as_f64().abs()).fold(0.0, f64::max);
                let sup = rows.iter().fold(grid_sup, |m, r| m.max(r.1));
                Ok(Applied {
                    values: rows.iter().map(|r| r.0.value).collect(),
                    se: rows.iter().map(|r| r.0.se).collect(),
                    evaluated_sup: sup,
                })
            }
        }
    }

    /// `P_{k dt} f` at every node for `k = 0..=n`, for a closure with `comps`
    /// outputs. The Monte Carlo variant reuses the paths behind `lag_kernels`.
    pub fn apply_map_lags<F>(
        &self,
        space: &TruncatedSpace<T>,
        dt: T,
        n: usize,
        comps: usize,
        f: F,
    ) -> Result<Vec<Field<T>>>
    where
        F: Fn(&[T], &mut [T]) + Sync,
    {
        self.check(space, dt)?;
        let d = self.dim();
        let nodes = space.n_nodes();
        let eval_grid = || {
            let mut values = vec![T::zero(); nodes * comps];
            for i in 0..nodes {
                f(space.node(i), &mut values[i * comps..(i + 1) * comps]);
            }
            Field { comps, values }
        };
        let mut out = vec![eval_grid()];
        if n == 0 || dt == T::zero() {
            out.resize(n + 1, out[0].clone());
            return Ok(out);
        }
        match &self.kind {
            SemigroupKind::OuAnalytic => {
                let q = space.quad_order();
                let rule = gauss_hermite::<T>(q);
                let inner = q.pow(d as u32);
                for k in 1..=n {
                    let t = dt * T::from_usize_lossy(k);
                    let decay: Vec<T> = self.lambdas.iter().map(|&l| (l * t).exp()).collect();
                    let sd: Vec<T> = self.q_t(t).iter().map(|v| v.sqrt()).collect();
                    let values: Vec<T> = (0..nodes)
                        .into_par_iter()
                        .flat_map_iter(|i| {
                            let x = space.node(i);
                            let mut y = vec![T::zero(); d];
                            let mut v = vec![T::zero(); comps];
                            let mut acc = vec![T::zero(); comps];
                            for m in 0..inner {
                                let mut rem = m;
                                let mut w = T::one();
                                for a in (0..d).rev() {
                                    let j = rem % q;
                                    rem /= q;
                                    y[a] = decay[a] * x[a] + sd[a] * rule.nodes[j];
                                    w *= rule.weights[j];
                                }
                                f(&y, &mut v);
                                for c in 0..comps {
                                    acc[c] += w * v[c];
                                }
                            }
                            acc
                        })
                        .collect();
                    out.push(Field { comps, values });
                }
            }
            SemigroupKind::McEuler { steps_per_unit, .. } => {
                let per = ((dt.as_f64() * *steps_per_unit as f64).ceil() as usize).max(1);
                let records: Vec<usize> = (1..=n).map(|k| k * per).collect();
                let ens = self.simulate(space, dt * T::from_usize_lossy(n), n * per, &records, self.mc_seed())?;
                let inv = T::one() / T::from_usize_lossy(ens.paths);
                let fields: Vec<Field<T>> = (0..n)
                    .into_par_iter()
                    .map(|r| {
                        let mut values = vec![T::zero(); nodes * comps];
                        let mut v = vec![T::zero(); comps];
                        for i in 0..nodes {
                            for p in 0..ens.paths {
                                f(ens.point(i, p, r), &mut v);
                                for c in 0..comps {
                                    values[i * comps + c] += v[c];
                                }
                            }
                        }
                        values.iter_mut().for_each(|x| *x *= inv);
                        Field { comps, values }
                    })
                    .collect();
                out.extend(fields);
            }
        }
        Ok(out)
    }

    fn ou_kernel(&self, space: &TruncatedSpace<T>, t: T) -> Kernel<T> {
        let q = space.quad_order();
        let rule = gauss_hermite::<T>(q);
        let qt = self.q_t(t);
        let mats = space
            .axes()
            .iter()
            .enumerate()
            .map(|(a, axis)| {
                let decay = (self.lambdas[a] * t).exp();
                let sd = qt[a].sqrt();
                let mut m = vec![T::zero(); q * q];
                let mut row = vec![T::zero(); q];
                for i in 0..q {
                    for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
                        axis.cardinal_row(decay * axis.nodes[i] + sd * z, &mut row);
                        for j in 0..q {
                            m[i * q + j] += w * row[j];
                        }
                    }
                }
                m
            })
            .collect();
        Kernel::Separable(mats)
    }

    fn mc_seed(&self) -> u64 {
        match &self.kind {
            SemigroupKind::McEuler { seed, .. } => *seed,
            SemigroupKind::OuAnalytic => 0,
        }
    }

    fn mc_steps(&self, t: T) -> (usize, T) {
        let spu = match &self.kind {
            SemigroupKind::McEuler { steps_per_unit, .. } => *steps_per_unit,
            SemigroupKind::OuAnalytic => 1,
        };
        let steps = ((t.as_f64() * spu as f64 - 1e-9).ceil() as usize).max(1);
        (steps, t / T::from_usize_lossy(steps))
    }

    /// Euler paths from every node with common random numbers across nodes.
    fn simulate(
        &self,
        space: &TruncatedSpace<T>,
        horizon: T,
        steps: usize,
        records: &[usize],
        seed: u64,
    ) -> Result<McEnsemble<T>> {
        let (perturbation, paths) = match &self.kind {
            SemigroupKind::McEuler { perturbation, paths, .. } => (perturbation.clone(), *paths),
            SemigroupKind::OuAnalytic => {
                return Err(Error::Precondition("Euler simulation requested for the analytic kernel".into()))
            }
        };
        let d = self.dim();
        let n = space.n_nodes();
        let h = horizon / T::from_usize_lossy(steps);
        let sqh = h.sqrt();
        let sig: Vec<T> = self.noise.iter().map(|c| c.sqrt()).collect();
        let r = records.len();
        // normals[p][step][axis], shared by every start node
        let normals: Vec<Vec<T>> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let mut g = rng::stream(seed, salt::SEMIGROUP, p as u64);
                (0..steps * d).map(|_| rng::normal::<T, _>(&mut g)).collect()
            })
            .collect();
        let points: Vec<T> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let start = space.node(i).to_vec();
                let mut out = vec![T::zero(); paths * r * d];
                let mut x = vec![T::zero(); d];
                let mut fx = vec![T::zero(); d];
                for p in 0..paths {
                    x.copy_from_slice(&start);
                    let z = &normals[p];
                    let mut next = 0;
                    for s in 0..steps {
                        perturbation.eval(&x, &mut fx);
                        for a in 0..d {
                            let xa = x[a];
                            x[a] = xa + (self.lambdas[a] * xa + fx[a]) * h + sig[a] * sqh * z[s * d + a];
                        }
                        if next < r && records[next] == s + 1 {
                            out[(p * r + next) * d..(p * r + next + 1) * d].copy_from_slice(&x);
                            next += 1;
                        }
                    }
                }
                out
            })
            .collect();
        Ok(McEnsemble { dim: d, paths, records: r, points })
    }

    /// `‖P_s(P_t f) - P_{s+t} f‖₂` with a standard error for the Monte Carlo kernel.
    pub fn composition_residual(&self, space: &TruncatedSpace<T>, s: T, t: T, field: &Field<T>) -> Result<Estimate> {
        self.check(space, s)?;
        self.check(space, t)?;
        space.check_field(field)?;
        if s == T::zero() {
            return Ok(Estimate::exact(0.0));
        }
        match &self.kind {
            SemigroupKind::OuAnalytic => {
                let lhs = self.kernel(space, s)?.apply(space, &self.kernel(space, t)?.apply(space, field));
                let rhs = self.kernel(space, s + t)?.apply(space, field);
                let diff = lhs.zip_map(&rhs, |a, b| a - b);
                Ok(Estimate::exact(space.norm_sq(&diff).sqrt().as_f64()))
            }
            SemigroupKind::McEuler { .. } => {
                let l = field.comps;
                let (steps_s, hs) = self.mc_steps(s);
                let (steps_st, hst) = self.mc_steps(s + t);
                if (hs - hst).abs() > T::lit(1e-12) * hs.max(T::one()) {
                    return Err(Error::Domain("s and s+t must share the Euler step of the kernel".into()));
                }
                // inner kernel from an independent seed, outer paths through time s to s+t
                let seed = self.mc_seed();
                let (tsteps, _) = self.mc_steps(t);
                let inner = self.simulate(space, t, tsteps, &[tsteps], seed ^ 0x5bd1_e995)?;
                let g = Kernel::Dense(inner.dense_kernel(space, 0)).apply(space, field);
                let g_se = inner.interp_se(space, 0, field);
                let outer = self.simulate(space, s + t, steps_st, &[steps_s, steps_st], seed)?;
                let ks = outer.dense_kernel(space, 0);
                let n = space.n_nodes();
                let mut mean = vec![0.0f64; n * l];
                let mut se2 = vec![0.0f64; n];
                let mut gv = vec![T::zero(); l];
                let mut fv = vec![T::zero(); l];
                for i in 0..n {
                    let mut diffs = vec![Vec::with_capacity(outer.paths); l];
                    for p in 0..outer.paths {
                        space.interpolate(&g.values, l, outer.point(i, p, 0), &mut gv);
                        space.interpolate(&field.values, l, outer.point(i, p, 1), &mut fv);
                        for c in 0..l {
                            diffs[c].push(gv[c] - fv[c]);
                        }
                    }
                    for c in 0..l {
                        let e = Estimate::from_samples(&diffs[c]);
                        mean[i * l + c] = e.value;
                        let prop: f64 = (0..n).map(|j| ks[i * n + j].as_f64().abs() * g_se[j * l + c]).sum();
                        se2[i] += e.se * e.se + prop * prop;
                    }
                }
                let w = space.weights();
                let resid: f64 =
                    (0..n).map(|i| w[i].as_f64() * (0..l).map(|c| mean[i * l + c].powi(2)).sum::<f64>()).sum();
                let se: f64 = (0..n).map(|i| w[i].as_f64() * se2[i]).sum();
                Ok(Estimate { value: resid.sqrt(), se: se.sqrt() })
            }
        }
    }
}

fn validate_linear<T: Real>(lambdas: &[T], noise: &[T]) -> Result<()> {
    let mut problems = Vec::new();
    if lambdas.is_empty() {
        problems.push("no drift eigenvalues".to_string());
    }
    if lambdas.len() != noise.len() {
        problems.push(format!("{} drift eigenvalues vs {} noise entries", lambdas.len(), noise.len()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l < T::zero())) {
        problems.push(format!("drift eigenvalue {l} must be negative"));
    }
    if let Some(c) = noise.iter().find(|c| !(**c > T::zero())) {
        problems.push(format!("noise entry {c} must be positive"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

/// Largest sampled `⟨F(x)-F(y), x-y⟩` over random pairs.
fn dissipativity_margin<T: Real>(p: &Perturbation<T>, d: usize, seed: u64) -> f64 {
    if p.is_none() {
        return f64::NEG_INFINITY;
    }
    let mut g = rng::stream(seed, salt::VALIDATE, 0);
    let mut worst = f64::NEG_INFINITY;
    let (mut x, mut y, mut fx, mut fy) =
        (vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]);
    for _ in 0..2000 {
        for a in 0..d {
            x[a] = rng::normal::<T, _>(&mut g) * T::lit(3.0);
            y[a] = rng::normal::<T, _>(&mut g) * T::lit(3.0);
        }
        p.eval(&x, &mut fx);
        p.eval(&y, &mut fy);
        let m: T = (0..d).map(|a| (fx[a] - fy[a]) * (x[a] - y[a])).sum();
        worst = worst.max(m.as_f64());
    }
    worst
}

/// Node values of `P_t f` for a closure, with per-node standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct Applied {
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    /// Largest `|f|` over every point at which `f` was evaluated.
    pub evaluated_sup: f64,
}

/// Linear map on nodal values.
#[derive(Debug, Clone)]
pub enum Kernel<T> {
    Identity,
    /// One `q x q` matrix per axis.
    Separable(Vec<Vec<T>>),
    /// Full `n x n` matrix.
    Dense(Vec<T>),
}

impl<T: Real> Kernel<T> {
    pub fn apply(&self, space: &TruncatedSpace<T>, field: &Field<T>) -> Field<T> {
        match self {
            Kernel::Identity => field.clone(),
            Kernel::Separable(mats) => {
                let mut values = field.values.clone();
                for (a, m) in mats.iter().enumerate() {
                    values = space.apply_axis(&values, field.comps, a, m);
                }
                Field { comps: field.comps, values }
            }
            Kernel::Dense(m) => {
                let n = space.n_nodes();
                let l = field.comps;
                let mut values = vec![T::zero(); n * l];
                for i in 0..n {
                    let row = &m[i * n..(i + 1) * n];
                    for c in 0..l {
                        let mut acc = T::zero();
                        for (j, &k) in row.iter().enumerate() {
                            acc += k * field.values[j * l + c];
                        }
                        values[i * l + c] = acc;
                    }
                }
                Field { comps: l, values }
            }
        }
    }
}

struct McEnsemble<T> {
    dim: usize,
    paths: usize,
    records: usize,
    /// `[node][path][record][axis]`
    points: Vec<T>,
}

impl<T: Real> McEnsemble<T> {
    fn point(&self, node: usize, path: usize, record: usize) -> &[T] {
        let base = ((node * self.paths + path) * self.records + record) * self.dim;
        &self.points[base..base + self.dim]
    }

    fn dense_kernel(&self, space: &TruncatedSpace<T>, record: usize) -> Vec<T> {
        let n = space.n_nodes();
        let q = space.quad_order();
        let inv = T::one() / T::from_usize_lossy(self.paths);
        let rows: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut row = vec![T::zero(); n];
                for p in 0..self.paths {
                    let card = space.cardinal_rows(self.point(i, p, record));
                    for (j, r) in row.iter_mut().enumerate() {
                        let mut w = T::one();
                        let mut rem = j;
                        for a in (0..self.dim).rev() {
                            w *= card[a][rem % q];
                            rem /= q;
                        }
                        *r += w;
                    }
                }
                row.iter_mut().for_each(|r| *r *= inv);
                row
            })
            .collect();
        rows.concat()
    }

    fn interp_se(&self, space: &TruncatedSpace<T>, record: usize, field: &Field<T>) -> Vec<f64> {
        let n = space.n_nodes();
        let l = field.comps;
        let mut out = vec![0.0; n * l];
        let mut v = vec![T::zero(); l];
        for i in 0..n {
            let mut samples = vec![Vec::with_capacity(self.paths); l];
            for p in 0..self.paths {
                space.interpolate(&field.values, l, self.point(i, p, record), &mut v);
                for c in 0..l {
                    samples[c].push(v[c]);
                }
            }
            for c in 0..l {
                out[i * l + c] = Estimate::from_samples(&samples[c]).se;
            }
        }
        out
    }
}

/// Named test function for the semigroup audits.
#[derive(Clone)]
pub struct TestFunction<T> {
    pub name: String,
    pub f: Arc<dyn Fn(&[T]) -> T + Send + Sync>,
}

impl<T: Real> TestFunction<T> {
    pub fn new(name: impl Into<String>, f: impl Fn(&[T]) -> T + Send + Sync + 'static) -> Self {
        TestFunction { name: name.into(), f: Arc::new(f) }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct A3Row {
    pub t: f64,
    pub test: String,
    pub nonnegative_input: bool,
    pub min_value: f64,
    pub contraction: f64,
    pub invariance_gap: f64,
    pub invariance_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct A3Report {
    pub rows: Vec<A3Row>,
}

impl A3Report {
    pub fn positivity_holds(&self, tol: f64) -> bool {
        self.rows.iter().filter(|r| r.nonnegative_input).all(|r| r.min_value >= -tol)
    }

    pub fn max_contraction(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.contraction))
    }

    pub fn max_invariance_gap(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.invariance_gap))
    }
}

/// Positivity, sup-norm contraction and `μ`-invariance of `P_t` on test functions.
pub fn audit_a3<T: Real>(
    spec: &SemigroupSpec<T>,
    space: &TruncatedSpace<T>,
    times: &[T],
    tests: &[TestFunction<T>],
) -> Result<A3Report> {
    if times.is_empty() || tests.is_empty() {
        return Err(Error::config("audit_a3 needs at least one time and one test function"));
    }
    let w: Vec<f64> = space.weights().iter().map(|w| w.as_f64()).collect();
    let mut rows = Vec::new();
    for tf in tests {
        let f = tf.f.as_ref();
        let base: Vec<f64> = (0..space.n_nodes()).map(|i| f(space.node(i)).as_f64()).collect();
        let mass: f64 = base.iter().zip(&w).map(|(v, w)| v * w).sum();
        let nonneg = base.iter().all(|&v| v >= 0.0);
        for &t in times {
            let out = spec.apply_fn(space, t, f)?;
            let applied_mass: f64 = out.values.iter().zip(&w).map(|(v, w)| v * w).sum();
            let se: f64 = out.se.iter().zip(&w).map(|(s, w)| s * w).sum();
            let sup = out.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            rows.push(A3Row {
                t: t.as_f64(),
                test: tf.name.clone(),
                nonnegative_input: nonneg,
                min_value: out.values.iter().copied().fold(f64::INFINITY, f64::min),
                contraction: if out.evaluated_sup > 0.0 { sup / out.evaluated_sup } else { 0.0 },
                invariance_gap: (applied_mass - mass).abs(),
                invariance_se: se,
            });
        }
    }
    Ok(A3Report { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn setup() -> (SemigroupSpec<f64>, TruncatedSpace<f64>) {
        let spec = SemigroupSpec::ou(vec![-1.0], vec![1.0]).unwrap();
        let space = TruncatedSpace::build(1, &spec.invariant_variances(), 20).unwrap();
        (spec, space)
    }

    #[test]
    fn ou_mean_and_second_moment() {
        let (spec, s) = setup();
        let t = 0.7f64;
        let x = s.sample_scalar(|x| x[0]);
        let px = spec.apply(&s, t, &x).unwrap();
        for i in 0..s.n_nodes() {
            let xi = s.node(i)[0];
            assert!((px.values[i] - (-t).exp() * xi).abs() <= 1e-10 * xi.abs().max(1.0));
        }
        let x2 = s.sample_scalar(|x| x[0] * x[0]);
        let p2 = spec.apply(&s, t, &x2).unwrap();
        for i in 0..s.n_nodes() {
            let xi = s.node(i)[0];
            let exact = (-2.0 * t).exp() * xi * xi + (1.0 - (-2.0 * t).exp()) / 2.0;
            assert_relative_eq!(p2.values[i], exact, max_relative = 1e-8);
        }
    }

    #[test]
    fn conservative_and_identity_at_zero() {
        let (spec, s) = setup();
        let one = s.sample_scalar(|_| 1.0);
        let p = spec.apply(&s, 0.3, &one).unwrap();
        assert!(p.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let f = s.sample_scalar(|x| x[0].sin());
        assert_eq!(spec.apply(&s, 0.0, &f).unwrap(), f);
        assert!(matches!(spec.apply(&s, -0.1, &f), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_specs() {
        assert!(SemigroupSpec::<f64>::ou(vec![0.5], vec![1.0]).is_err());
        assert!(SemigroupSpec::<f64>::ou(vec![-1.0], vec![0.0]).is_err());
        let up = Perturbation::Custom { f: Arc::new(|x: &[f64], o: &mut [f64]| o[0] = x[0]), lipschitz: 1.0 };
        assert!(matches!(SemigroupSpec::mc_euler(vec![-1.0], vec![1.0], up, 16, 100, 1), Err(Error::Precondition(_))));
    }

    #[test]
    fn composition_is_exact_for_ou() {
        let (spec, s) = setup();
        let f = s.sample_scalar(|x| (x[0]).tanh() + 0.3 * x[0] * x[0]);
        assert_eq!(spec.composition_residual(&s, 0.0, 0.5, &f).unwrap().value, 0.0);
        assert!(spec.composition_residual(&s, 0.5, 0.5, &f).unwrap().value <= 1e-8);
    }

    #[test]
    fn lag_kernels_match_direct() {
        let (spec, s) = setup();
        let ks = spec.lag_kernels(&s, 0.25, 4).unwrap();
        let f = s.sample_scalar(|x| (-x[0] * x[0]).exp());
        let a = ks[3].apply(&s, &f);
        let b = spec.apply(&s, 0.75, &f).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn a3_audit_on_ou() {
        let (spec, s) = setup();
        let tests = vec![
            TestFunction::new("gauss", |x: &[f64]| (-x[0] * x[0]).exp()),
            TestFunction::new("cos", |x: &[f64]| x[0].cos()),
            TestFunction::new("sin2", |x: &[f64]| x[0].sin().powi(2)),
        ];
        let rep = audit_a3(&spec, &s, &[0.1, 0.5, 1.0, 2.0], &tests).unwrap();
        assert!(rep.positivity_holds(1e-10));
        assert!(rep.max_contraction() <= 1.0 + 1e-10);
        assert!(rep.max_invariance_gap() <= 1e-8, "{}", rep.max_invariance_gap());
    }

    #[test]
    fn mc_kernel_close_to_ou_without_perturbation() {
        let spec = SemigroupSpec::mc_euler(vec![-1.0], vec![1.0], Perturbation::None, 64, 4000, 7).unwrap();
        let s = TruncatedSpace::build(1, &spec.invariant_variances(), 12).unwrap();
        let out = spec.apply_fn(&s, 0.5, |x| x[0]).unwrap();
        for i in 0..s.n_nodes() {
            let xi = s.node(i)[0];
            // Euler mean (1 - h)^n x versus e^{-t} x, plus sampling error
            let euler = (1.0 - 1.0 / 64.0f64).powi(32) * xi;
            assert!((out.values[i] - euler).abs() <= 4.0 * out.se[i] + 1e-12);
        }
    }

    #[test]
    fn mc_composition_within_standard_errors() {
        let spec = SemigroupSpec::mc_euler(vec![-1.0], vec![1.0], Perturbation::Dissipative, 32, 2000, 11).unwrap();
        let s: TruncatedSpace<f64> = TruncatedSpace::build(1, &spec.invariant_variances(), 10).unwrap();
        let f = s.sample_scalar(|x| (x[0]).tanh());
        let r = spec.composition_residual(&s, 0.5, 0.5, &f).unwrap();
        assert!(r.value <= 3.0 * r.se, "{r:?}");
    }
}
