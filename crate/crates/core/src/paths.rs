//! Path ensembles of the diffusion `dX = (ΛX + F(X)) dt + σ dW` with
//! `σσ* = 2A`, their coordinate martingales and the bracket and Itô audits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::PolyBasis;
use crate::error::{Error, Result};
use crate::rng::{self, salt};
use crate::semigroup::{SemigroupKind, SemigroupSpec};
use crate::space::{DiffusionCoefficient, SpaceTimeField, TruncatedSpace};
use crate::stats::Estimate;
use crate::Real;

pub const MAX_PATHS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start<T> {
    Point(Vec<T>),
    /// i.i.d. draws from the Gaussian invariant measure of the linear part.
    Invariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Exact transitions for the analytic kernel, Euler otherwise.
    #[default]
    Auto,
    Exact,
    Euler,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathConfig<T> {
    pub start: Start<T>,
    pub horizon: T,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
}

/// Dense ensemble: `states` is `[path][step][axis]` with `steps + 1` time
/// nodes, `increments` holds the martingale increments `σ ΔW` per step.
#[derive(Debug, Clone)]
pub struct PathEnsemble<T> {
    pub paths: usize,
    pub steps: usize,
    pub dim: usize,
    pub horizon: T,
    pub dt: T,
    pub seed: u64,
    pub start: Start<T>,
    pub scheme: Scheme,
    states: Vec<T>,
    increments: Vec<T>,
}

impl<T: Real> PathEnsemble<T> {
    pub fn state(&self, path: usize, step: usize) -> &[T] {
        let b = (path * (self.steps + 1) + step) * self.dim;
        &self.states[b..b + self.dim]
    }

    pub fn increment(&self, path: usize, step: usize) -> &[T] {
        let b = (path * self.steps + step) * self.dim;
        &self.increments[b..b + self.dim]
    }

    pub fn time(&self, step: usize) -> T {
        self.dt * T::from_usize_lossy(step)
    }

    /// Paths `first..first + count` as a standalone ensemble.
    pub fn subset(&self, first: usize, count: usize) -> PathEnsemble<T> {
        let (n, d) = (self.steps, self.dim);
        let last = (first + count).min(self.paths);
        PathEnsemble {
            paths: last - first,
            steps: n,
            dim: d,
            horizon: self.horizon,
            dt: self.dt,
            seed: self.seed,
            start: self.start.clone(),
            scheme: self.scheme,
            states: self.states[first * (n + 1) * d..last * (n + 1) * d].to_vec(),
            increments: self.increments[first * n * d..last * n * d].to_vec(),
        }
    }

    /// States of every path at one time node, `[path][axis]`.
    pub fn states_at(&self, step: usize) -> Vec<T> {
        (0..self.paths).flat_map(|p| self.state(p, step).to_vec()).collect()
    }

    pub fn increments_at(&self, step: usize) -> Vec<T> {
        (0..self.paths).flat_map(|p| self.increment(p, step).to_vec()).collect()
    }

    pub fn states(&self) -> &[T] {
        &self.states
    }

    pub fn increments(&self) -> &[T] {
        &self.increments
    }

    /// Write `<prefix>.states.bin` and `<prefix>.increments.bin`: one ASCII
    /// header line `f64le <shape...>` followed by little-endian f64 values.
    pub fn write_binary(&self, prefix: &Path) -> Result<()> {
        let name = |s: &str| {
            let mut p = prefix.as_os_str().to_owned();
            p.push(s);
            std::path::PathBuf::from(p)
        };
        write_columns(&name(".states.bin"), &[self.paths, self.steps + 1, self.dim], &self.states)?;
        write_columns(&name(".increments.bin"), &[self.paths, self.steps, self.dim], &self.increments)
    }
}

fn write_columns<T: Real>(path: &Path, shape: &[usize], values: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let dims: Vec<String> = shape.iter().map(|s| s.to_string()).collect();
    writeln!(w, "f64le {}", dims.join(" "))?;
    for v in values {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a file produced by [`PathEnsemble::write_binary`].
pub fn read_columns(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("f64le") {
        return Err(Error::Domain(format!("{} is not a path column file", path.display())));
    }
    let shape: Vec<usize> =
        parts.map(|s| s.parse().map_err(|_| Error::Domain(format!("bad shape entry {s:?}")))).collect::<Result<_>>()?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Shape(format!("{} bytes for shape {shape:?}", bytes.len())));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((shape, values))
}

/// Simulate `paths` independent trajectories. Path `p` draws from its own
/// stream, so the ensemble does not depend on how work is scheduled.
pub fn sample<T: Real>(spec: &SemigroupSpec<T>, cfg: &PathConfig<T>) -> Result<PathEnsemble<T>> {
    let d = spec.dim();
    let mut problems = Vec::new();
    if cfg.steps == 0 {
        problems.push("paths need at least one time step".to_string());
    }
    if cfg.paths == 0 {
        problems.push("at least one path is required".to_string());
    }
    if cfg.paths > MAX_PATHS {
        problems.push(format!("{} paths exceed the cap of {MAX_PATHS}", cfg.paths));
    }
    if !(cfg.horizon > T::zero()) || !cfg.horizon.is_finite() {
        problems.push(format!("horizon {} must be positive", cfg.horizon));
    }
    if let Start::Point(x) = &cfg.start {
        if x.len() != d {
            problems.push(format!("start point has {} coordinates, process has {d}", x.len()));
        }
    }
    let perturbation = match &spec.kind {
        SemigroupKind::OuAnalytic => None,
        SemigroupKind::McEuler { perturbation, .. } => Some(perturbation.clone()),
    };
    let scheme = match cfg.scheme {
        Scheme::Auto if perturbation.as_ref().is_none_or(|p| p.is_none()) => Scheme::Exact,
        Scheme::Auto => Scheme::Euler,
        s => s,
    };
    if scheme == Scheme::Exact && perturbation.as_ref().is_some_and(|p| !p.is_none()) {
        problems.push("exact sampling is only available without a drift perturbation".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let n = cfg.steps;
    let h = cfg.horizon / T::from_usize_lossy(n);
    let sqh = h.sqrt();
    let sig: Vec<T> = spec.noise.iter().map(|c| c.sqrt()).collect();
    let inv_sd: Vec<T> = spec.invariant_variances().iter().map(|v| v.sqrt()).collect();
    // exact OU step: X' = e^{λh} X + σ I, with (I, ΔW) jointly Gaussian
    let exact: Vec<(T, T, T)> = spec
        .lambdas
        .iter()
        .map(|&l| {
            let e = (l * h).exp();
            let var_i = (T::lit(2.0) * l * h).exp_m1() / (T::lit(2.0) * l);
            let cov = (l * h).exp_m1() / l;
            let b = cov / h;
            let c = (var_i - cov * cov / h).max(T::zero()).sqrt();
            (e, b, c)
        })
        .collect();

    let per_path: Vec<(Vec<T>, Vec<T>)> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut g = rng::stream(cfg.seed, salt::PATHS, p as u64);
            let mut x: Vec<T> = match &cfg.start {
                Start::Point(x0) => x0.clone(),
                Start::Invariant => {
                    let mut s = rng::stream(cfg.seed, salt::START, p as u64);
                    inv_sd.iter().map(|&sd| sd * rng::normal::<T, _>(&mut s)).collect()
                }
            };
            let mut states = Vec::with_capacity((n + 1) * d);
            let mut incs = Vec::with_capacity(n * d);
            let mut fx = vec![T::zero(); d];
            states.extend_from_slice(&x);
            for _ in 0..n {
                match scheme {
                    Scheme::Exact => {
                        for a in 0..d {
                            let dw = sqh * rng::normal::<T, _>(&mut g);
                            let z2 = rng::normal::<T, _>(&mut g);
                            let (e, b, c) = exact[a];
                            let i = b * dw + c * z2;
                            x[a] = e * x[a] + sig[a] * i;
                            incs.push(sig[a] * dw);
                        }
                    }
                    _ => {
                        match &perturbation {
                            Some(f) => f.eval(&x, &mut fx),
                            None => fx.iter_mut().for_each(|v| *v = T::zero()),
                        }
                        for a in 0..d {
                            let dm = sig[a] * sqh * rng::normal::<T, _>(&mut g);
                            let xa = x[a];
                            x[a] = xa + (spec.lambdas[a] * xa + fx[a]) * h + dm;
                            incs.push(dm);
                        }
                    }
                }
                states.extend_from_slice(&x);
            }
            (states, incs)
        })
        .collect();

    let mut states = Vec::with_capacity(cfg.paths * (n + 1) * d);
    let mut increments = Vec::with_capacity(cfg.paths * n * d);
    for (s, i) in per_path {
        states.extend(s);
        increments.extend(i);
    }
    Ok(PathEnsemble {
        paths: cfg.paths,
        steps: n,
        dim: d,
        horizon: cfg.horizon,
        dt: h,
        seed: cfg.seed,
        start: cfg.start.clone(),
        scheme,
        states,
        increments,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BracketEntry {
    pub i: usize,
    pub j: usize,
    /// Path average of `Σ ΔM^i ΔM^j`.
    pub bracket: Estimate,
    /// Path average of `2∫ a_ij(X_s) ds` (trapezoid).
    pub compensator: Estimate,
    /// Path average of the difference of the two.
    pub residual: Estimate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BracketReport {
    pub from_step: usize,
    pub to_step: usize,
    pub entries: Vec<BracketEntry>,
}

impl BracketReport {
    pub fn entry(&self, i: usize, j: usize) -> Option<&BracketEntry> {
        self.entries.iter().find(|e| (e.i, e.j) == (i.min(j), i.max(j)))
    }

    /// Largest `|residual| / SE` over all entries.
    pub fn worst_z(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| {
                if e.residual.se > 0.0 {
                    e.residual.value.abs() / e.residual.se
                } else if e.residual.value == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Per-path `Σ_{k in [from, to)} ΔM^i_k ΔM^j_k`.
pub fn quadratic_covariation<T: Real>(ens: &PathEnsemble<T>, i: usize, j: usize, from: usize, to: usize) -> Vec<T> {
    (0..ens.paths)
        .map(|p| (from..to).fold(T::zero(), |acc, k| acc + ens.increment(p, k)[i] * ens.increment(p, k)[j]))
        .collect()
}

/// Empirical covariation against `2∫ a_ij(X_s) ds` over `[t_from, t_to]`.
pub fn bracket_residual_between<T: Real>(
    ens: &PathEnsemble<T>,
    a: &DiffusionCoefficient<T>,
    from: usize,
    to: usize,
) -> Result<BracketReport> {
    if a.dim() != ens.dim {
        return Err(Error::Shape(format!("diffusion dim {} vs ensemble dim {}", a.dim(), ens.dim)));
    }
    if from > to || to > ens.steps {
        return Err(Error::Domain(format!("step range {from}..{to} outside 0..{}", ens.steps)));
    }
    let d = ens.dim;
    let half = T::lit(0.5);
    // per path: trapezoid of the matrix path a(X_s)
    let comp: Vec<Vec<T>> = (0..ens.paths)
        .into_par_iter()
        .map(|p| {
            let mut m = vec![T::zero(); d * d];
            let mut acc = vec![T::zero(); d * d];
            for k in from..=to {
                let w = if k == from || k == to { half } else { T::one() };
                if from == to {
                    break;
                }
                a.matrix_at(ens.state(p, k), &mut m);
                for (o, v) in acc.iter_mut().zip(&m) {
                    *o += w * *v;
                }
            }
            acc.iter().map(|v| T::lit(2.0) * ens.dt * *v).collect()
        })
        .collect();
    let mut entries = Vec::new();
    for i in 0..d {
        for j in i..d {
            let q = quadratic_covariation(ens, i, j, from, to);
            let c: Vec<T> = comp.iter().map(|m| m[i * d + j]).collect();
            let r: Vec<T> = q.iter().zip(&c).map(|(x, y)| *x - *y).collect();
            entries.push(BracketEntry {
                i,
                j,
                bracket: Estimate::from_samples(&q),
                compensator: Estimate::from_samples(&c),
                residual: Estimate::from_samples(&r),
            });
        }
    }
    Ok(BracketReport { from_step: from, to_step: to, entries })
}

pub fn bracket_residual<T: Real>(ens: &PathEnsemble<T>, a: &DiffusionCoefficient<T>) -> Result<BracketReport> {
    bracket_residual_between(ens, a, 0, ens.steps)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub tests: usize,
    /// Tests with `|mean| > 3 SE`.
    pub exceed_3se: usize,
    pub max_z: f64,
}

/// `E[ΔM^i_k h(X_k)] = 0` for every basis polynomial `h`, axis `i` and step
/// `k`: the regression of each increment on the current state vanishes.
pub fn martingale_check<T: Real>(ens: &PathEnsemble<T>, degree: usize) -> Result<MartingaleReport> {
    let basis = PolyBasis::new(degree, &vec![T::one(); ens.dim])?;
    let k = basis.len();
    let d = ens.dim;
    let rows: Vec<(usize, usize, f64)> = (0..ens.steps)
        .into_par_iter()
        .map(|step| {
            let mut b = vec![0.0f64; k];
            let mut samples = vec![vec![0.0f64; ens.paths]; k * d];
            for p in 0..ens.paths {
                basis.eval(ens.state(p, step), &mut b);
                let inc = ens.increment(p, step);
                for m in 0..k {
                    for i in 0..d {
                        samples[m * d + i][p] = b[m] * inc[i].as_f64();
                    }
                }
            }
            let mut tests = 0;
            let mut exceed = 0;
            let mut worst = 0.0f64;
            for s in &samples {
                let e = Estimate::from_samples(s);
                if e.se > 0.0 {
                    tests += 1;
                    let z = e.value.abs() / e.se;
                    worst = worst.max(z);
                    if z > 3.0 {
                        exceed += 1;
                    }
                }
            }
            (tests, exceed, worst)
        })
        .collect();
    Ok(MartingaleReport {
        tests: rows.iter().map(|r| r.0).sum(),
        exceed_3se: rows.iter().map(|r| r.1).sum(),
        max_z: rows.iter().map(|r| r.2).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItoReport {
    pub steps: usize,
    /// Path average of `R`.
    pub mean: Estimate,
    /// Path average of `|R|²`.
    pub mean_square: Estimate,
    /// `sqrt(mean_square)`.
    pub rms: f64,
}

/// Gradient in `x` of a space-time field at `(t_k, x)`, written as `[comp][axis]`.
pub type GradientOracle<'a, T> = &'a (dyn Fn(usize, &[T], &mut [T]) + Sync);

/// Per path `R = u(T, X_N) - u(0, X_0) - Σ ⟨∇u(t_k, X_k), ΔM_k⟩ + Σ f(t_k, X_k) Δt`.
///
/// `u` (and `f`, if given) live on the space's grid with the ensemble's time
/// nodes; off-grid values come from the tensor interpolant. Without an oracle
/// the gradient is the derivative of the interpolant.
pub fn ito_residual<T: Real>(
    ens: &PathEnsemble<T>,
    space: &TruncatedSpace<T>,
    u: &SpaceTimeField<T>,
    f: Option<&SpaceTimeField<T>>,
    gradient: Option<GradientOracle<'_, T>>,
) -> Result<ItoReport> {
    if u.steps() != ens.steps {
        return Err(Error::Shape(format!("u has {} steps, ensemble {}", u.steps(), ens.steps)));
    }
    if (u.horizon() - ens.horizon).abs() > T::lit(1e-9) * ens.horizon.max(T::one()) {
        return Err(Error::Shape("u and ensemble horizons differ".into()));
    }
    if space.dim() != ens.dim {
        return Err(Error::Shape(format!("space dim {} vs ensemble dim {}", space.dim(), ens.dim)));
    }
    if let Some(f) = f {
        if f.steps() != u.steps() || f.comps() != u.comps() {
            return Err(Error::Shape("driver field does not match u".into()));
        }
    }
    let l = u.comps();
    let d = ens.dim;
    let n = ens.steps;
    let grads: Option<Vec<Vec<T>>> = match gradient {
        Some(_) => None,
        None => Some(u.slices.iter().map(|s| space.gradient(s).map(|g| g.values)).collect::<Result<_>>()?),
    };
    let residuals: Vec<Vec<T>> = (0..ens.paths)
        .into_par_iter()
        .map(|p| {
            let mut r = vec![T::zero(); l];
            let mut v = vec![T::zero(); l];
            let mut g = vec![T::zero(); l * d];
            let rows = space.cardinal_rows(ens.state(p, n));
            space.interpolate_with_rows(&u.slices[n].values, l, &rows, &mut r);
            for k in 0..n {
                let x = ens.state(p, k);
                let rows = space.cardinal_rows(x);
                if k == 0 {
                    space.interpolate_with_rows(&u.slices[0].values, l, &rows, &mut v);
                    for c in 0..l {
                        r[c] -= v[c];
                    }
                }
                match (&grads, gradient) {
                    (Some(gs), _) => space.interpolate_with_rows(&gs[k], l * d, &rows, &mut g),
                    (None, Some(oracle)) => oracle(k, x, &mut g),
                    (None, None) => unreachable!("either an oracle or interpolated gradients"),
                }
                let dm = ens.increment(p, k);
                for c in 0..l {
                    r[c] -= crate::scalar::dot(&g[c * d..(c + 1) * d], dm);
                }
                if let Some(f) = f {
                    space.interpolate_with_rows(&f.slices[k].values, l, &rows, &mut v);
                    for c in 0..l {
                        r[c] += v[c] * ens.dt;
                    }
                }
            }
            r
        })
        .collect();
    let sq: Vec<T> = residuals.iter().map(|r| crate::scalar::dot(r, r)).collect();
    let ms = Estimate::from_samples(&sq);
    // the signed mean is reported for scalar solutions only
    let mean = if l == 1 {
        Estimate::from_samples(&residuals.iter().map(|r| r[0]).collect::<Vec<_>>())
    } else {
        Estimate { value: f64::NAN, se: f64::NAN }
    };
    Ok(ItoReport { steps: n, mean, mean_square: ms, rms: ms.value.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semigroup::Perturbation;
    use crate::space::Field;

    fn ou() -> SemigroupSpec<f64> {
        SemigroupSpec::ou(vec![-1.0], vec![1.0]).unwrap()
    }

    fn cfg(start: Start<f64>, steps: usize, paths: usize) -> PathConfig<f64> {
        PathConfig { start, horizon: 1.0, steps, paths, seed: 11, scheme: Scheme::Auto }
    }

    #[test]
    fn starts_at_the_prescribed_point() {
        let ens = sample(&ou(), &cfg(Start::Point(vec![0.7]), 4, 100)).unwrap();
        assert!((0..100).all(|p| ens.state(p, 0) == [0.7]));
        assert_eq!(ens.scheme, Scheme::Exact);
    }

    #[test]
    fn ou_moments() {
        let x0 = 1.3;
        let ens = sample(&ou(), &cfg(Start::Point(vec![x0]), 8, 20_000)).unwrap();
        for k in [2, 8] {
            let t = ens.time(k);
            let xs = ens.states_at(k);
            let m = Estimate::from_samples(&xs);
            assert!(m.within((-t).exp() * x0, 3.0), "{m:?}");
            let c: Vec<f64> = xs.iter().map(|x| (x - (-t).exp() * x0).powi(2)).collect();
            let v = Estimate::from_samples(&c);
            assert!(v.within((1.0 - (-2.0 * t).exp()) / 2.0, 3.0), "{v:?}");
        }
    }

    #[test]
    fn invariant_start_has_invariant_law() {
        let ens = sample(&ou(), &cfg(Start::Invariant, 2, 20_000)).unwrap();
        let sq: Vec<f64> = ens.states_at(0).iter().map(|x| x * x).collect();
        assert!(Estimate::from_samples(&sq).within(0.5, 3.0));
    }

    #[test]
    fn rejects_bad_sizes() {
        match sample(
            &ou(),
            &PathConfig {
                start: Start::Point(vec![0.0, 1.0]),
                horizon: 0.0,
                steps: 0,
                paths: 0,
                seed: 0,
                scheme: Scheme::Auto,
            },
        ) {
            Err(Error::Config(list)) => assert_eq!(list.len(), 4),
            other => panic!("{other:?}"),
        }
        let mc = SemigroupSpec::mc_euler(vec![-1.0], vec![1.0], Perturbation::Dissipative, 16, 4, 0).unwrap();
        let mut c = cfg(Start::Point(vec![0.0]), 4, 10);
        c.scheme = Scheme::Exact;
        assert!(sample(&mc, &c).is_err());
    }

    #[test]
    fn bracket_matches_compensator_and_is_additive() {
        let sg = ou();
        let a = sg.diffusion().unwrap();
        let ens = sample(&sg, &cfg(Start::Point(vec![0.0]), 16, 20_000)).unwrap();
        let full = bracket_residual(&ens, &a).unwrap();
        let e = full.entry(0, 0).unwrap();
        assert!((e.compensator.value - 1.0).abs() < 1e-12);
        assert!(e.residual.within(0.0, 3.0), "{e:?}");
        let first = quadratic_covariation(&ens, 0, 0, 0, 8);
        let second = quadratic_covariation(&ens, 0, 0, 8, 16);
        let total = quadratic_covariation(&ens, 0, 0, 0, 16);
        for ((a, b), c) in first.iter().zip(&second).zip(&total) {
            assert!((a + b - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }

    #[test]
    fn cross_bracket_vanishes() {
        let sg = SemigroupSpec::ou(vec![-1.0, -0.5], vec![1.0, 2.0]).unwrap();
        let ens = sample(&sg, &cfg(Start::Point(vec![0.0, 0.0]), 16, 20_000)).unwrap();
        let rep = bracket_residual(&ens, &sg.diffusion().unwrap()).unwrap();
        assert!(rep.entry(0, 1).unwrap().residual.within(0.0, 3.0));
        assert!(rep.entry(1, 1).unwrap().residual.within(0.0, 3.0));
        assert!((rep.entry(1, 1).unwrap().compensator.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn martingale_increments_are_uncorrelated_with_the_state() {
        let ens = sample(&ou(), &cfg(Start::Invariant, 8, 20_000)).unwrap();
        let rep = martingale_check(&ens, 2).unwrap();
        assert_eq!(rep.tests, 8 * 3);
        assert!(rep.exceed_3se <= 1, "{rep:?}");
    }

    #[test]
    fn exact_and_euler_agree_in_law() {
        let mut c = cfg(Start::Point(vec![1.0]), 64, 20_000);
        let exact = sample(&ou(), &c).unwrap();
        c.scheme = Scheme::Euler;
        c.seed = 12;
        let euler = sample(&ou(), &c).unwrap();
        let a = Estimate::from_samples(&exact.states_at(64));
        let b = Estimate::from_samples(&euler.states_at(64));
        let diff = a.minus(&b);
        // Euler bias (1 - h)^n - e^{-1} is about 3e-3
        assert!(diff.value.abs() <= 3.0 * diff.se + 4e-3, "{diff:?}");
        let va = Estimate::from_samples(&exact.states_at(64).iter().map(|x| x * x).collect::<Vec<_>>());
        let vb = Estimate::from_samples(&euler.states_at(64).iter().map(|x| x * x).collect::<Vec<_>>());
        let dv = va.minus(&vb);
        assert!(dv.value.abs() <= 3.0 * dv.se + 1e-2, "{dv:?}");
    }

    #[test]
    fn constant_solution_has_zero_ito_residual() {
        let sg = ou();
        let space = TruncatedSpace::build(1, &sg.invariant_variances(), 12).unwrap();
        let ens = sample(&sg, &cfg(Start::Point(vec![0.2]), 8, 200)).unwrap();
        let c = space.sample_scalar(|_| 1.5);
        let u = SpaceTimeField::new((0..=8).map(|k| k as f64 / 8.0).collect(), vec![c; 9]).unwrap();
        let zero = |_: usize, _: &[f64], o: &mut [f64]| o[0] = 0.0;
        // the interpolant reproduces constants up to roundoff
        let rep = ito_residual(&ens, &space, &u, None, Some(&zero)).unwrap();
        assert!(rep.mean_square.value < 1e-28);
        let rep = ito_residual(&ens, &space, &u, None, None).unwrap();
        assert!(rep.mean_square.value < 1e-20);
    }

    #[test]
    fn ito_residual_of_exact_ou_mean_is_small() {
        let sg = ou();
        let space = TruncatedSpace::build(1, &sg.invariant_variances(), 16).unwrap();
        let ens = sample(&sg, &cfg(Start::Point(vec![0.5]), 32, 5_000)).unwrap();
        let slices: Vec<Field<f64>> =
            (0..=32).map(|k| space.sample_scalar(|x| (-(1.0 - k as f64 / 32.0)).exp() * x[0])).collect();
        let u = SpaceTimeField::new((0..=32).map(|k| k as f64 / 32.0).collect(), slices).unwrap();
        let rep = ito_residual(&ens, &space, &u, None, None).unwrap();
        let dt = 1.0 / 32.0;
        assert!(rep.mean.within(0.0, 3.0) || rep.mean.value.abs() < dt);
        assert!(rep.mean_square.value <= 3.0 * rep.mean_square.se + dt * dt);
    }

    #[test]
    fn binary_round_trip() {
        let ens = sample(&ou(), &cfg(Start::Point(vec![0.1]), 3, 5)).unwrap();
        let dir = std::env::temp_dir().join(format!("kolmo-paths-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let prefix = dir.join("ens");
        ens.write_binary(&prefix).unwrap();
        let (shape, values) = read_columns(&dir.join("ens.states.bin")).unwrap();
        assert_eq!(shape, vec![5, 4, 1]);
        assert_eq!(values, ens.states());
        let (shape, values) = read_columns(&dir.join("ens.increments.bin")).unwrap();
        assert_eq!(shape, vec![5, 3, 1]);
        assert_eq!(values, ens.increments());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
