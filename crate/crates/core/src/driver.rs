//! Nonlinear drivers `f(t, x, y, z)` with their structural constants, plus the
//! regularisations used by the monotone existence pipeline.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;
use crate::rng::{self, salt};
use crate::Real;

/// Monotonicity rate `μ_t` in `⟨y-y', f(y)-f(y')⟩ <= μ_t |y-y'|²`.
#[derive(Clone)]
pub enum MonoRate<T> {
    Constant(T),
    Function(Arc<dyn Fn(T) -> T + Send + Sync>),
}

impl<T: Real> MonoRate<T> {
    pub fn rate(&self, t: T) -> T {
        match self {
            MonoRate::Constant(m) => *m,
            MonoRate::Function(f) => f(t),
        }
    }

    /// `α_t = ∫_0^t μ_s ds`.
    pub fn alpha(&self, t: T) -> T {
        match self {
            MonoRate::Constant(m) => *m * t,
            MonoRate::Function(f) => {
                let rule = gauss_legendre::<T>(16);
                let half = t * T::lit(0.5);
                rule.nodes.iter().zip(&rule.weights).map(|(&s, &w)| w * f(half * (s + T::one()))).sum::<T>() * half
            }
        }
    }

    /// `sup_{[0,T]} μ_t⁺`, sampled on 257 points for non-constant rates.
    pub fn sup_positive(&self, horizon: T) -> T {
        match self {
            MonoRate::Constant(m) => m.max(T::zero()),
            MonoRate::Function(f) => {
                (0..=256).map(|k| f(horizon * T::from_usize_lossy(k) / T::lit(256.0))).fold(T::zero(), |a, b| a.max(b))
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, MonoRate::Constant(m) if *m == T::zero())
    }
}

impl<T: std::fmt::Debug> std::fmt::Debug for MonoRate<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MonoRate::Constant(m) => write!(f, "Constant({m:?})"),
            MonoRate::Function(_) => write!(f, "Function(..)"),
        }
    }
}

/// Structural constants of a driver.
#[derive(Debug, Clone)]
pub struct DriverMeta<T> {
    /// `C` of the Lipschitz condition in `z`.
    pub lipschitz_z: T,
    /// Lipschitz constant in `y`; infinite when only monotone.
    pub lipschitz_y: T,
    pub mono_rate: MonoRate<T>,
    /// `‖f⁰‖_∞` with `f⁰(t,x) = f(t,x,0,0)`.
    pub f0_bound: T,
    /// `sup |f|` when the driver is bounded.
    pub sup_bound: Option<T>,
    /// True when `f` depends on `(t, x)` only.
    pub source_only: bool,
}

/// `f : [0,T] x R^d x R^l x R^{l x d} -> R^l`, with `z` row-major `l x d`.
pub trait Driver<T: Real>: Send + Sync {
    fn comps(&self) -> usize;
    fn dim(&self) -> usize;
    fn eval(&self, t: T, x: &[T], y: &[T], z: &[T], out: &mut [T]);
    fn meta(&self) -> &DriverMeta<T>;
    fn name(&self) -> String;

    /// `f^{',r}(t,x) = sup_{|y|<=r} |f(t,x,y,0) - f(t,x,0,0)|`. The default
    /// scans a radial grid along the coordinate axes and diagonals.
    fn growth_sup(&self, t: T, x: &[T], r: T) -> T {
        let l = self.comps();
        let z = vec![T::zero(); l * self.dim()];
        let zero = vec![T::zero(); l];
        let mut f0 = vec![T::zero(); l];
        self.eval(t, x, &zero, &z, &mut f0);
        let mut dirs: Vec<Vec<T>> = Vec::new();
        for a in 0..l {
            for s in [T::one(), -T::one()] {
                let mut v = vec![T::zero(); l];
                v[a] = s;
                dirs.push(v);
            }
        }
        if l > 1 {
            let inv = T::one() / T::from_usize_lossy(l).sqrt();
            dirs.push(vec![inv; l]);
            dirs.push(vec![-inv; l]);
        }
        let mut y = vec![T::zero(); l];
        let mut out = vec![T::zero(); l];
        let mut best = T::zero();
        for dir in &dirs {
            for k in 1..=32 {
                let rho = r * T::from_usize_lossy(k) / T::lit(32.0);
                for a in 0..l {
                    y[a] = dir[a] * rho;
                }
                self.eval(t, x, &y, &z, &mut out);
                let diff: Vec<T> = out.iter().zip(&f0).map(|(a, b)| *a - *b).collect();
                best = best.max(crate::scalar::norm2(&diff));
            }
        }
        best
    }

    /// `f⁰(t,x)`.
    fn f0(&self, t: T, x: &[T], out: &mut [T]) {
        let y = vec![T::zero(); self.comps()];
        let z = vec![T::zero(); self.comps() * self.dim()];
        self.eval(t, x, &y, &z, out);
    }
}

pub type DriverRef<T> = Arc<dyn Driver<T>>;

type SourceFn<T> = Arc<dyn Fn(T, &[T]) -> T + Send + Sync>;

/// The shipped driver families.
#[derive(Clone)]
pub enum Preset<T> {
    /// `a y + g(t, x)` componentwise.
    Linear { a: T, source: Option<(SourceFn<T>, T)> },
    /// `a y + b sin(z[·][axis])` componentwise.
    SinZ { y_coef: T, z_coef: T, axis: usize },
    /// `-c |y|² y`.
    Cubic { coef: T },
    /// Scalar table `Σ_k c_k y^k + Σ_a b_a z_a + κ`.
    Table { y_poly: Vec<T>, z_coefs: Vec<T>, constant: T },
}

/// A preset bound to its dimensions and metadata.
#[derive(Clone)]
pub struct PresetDriver<T> {
    preset: Preset<T>,
    comps: usize,
    dim: usize,
    meta: DriverMeta<T>,
}

impl<T: Real> PresetDriver<T> {
    pub fn new(preset: Preset<T>, comps: usize, dim: usize) -> Result<Self> {
        let mut problems = Vec::new();
        if comps == 0 || dim == 0 {
            problems.push(format!("driver needs comps >= 1 and dim >= 1 (got {comps}, {dim})"));
        }
        let meta = match &preset {
            Preset::Linear { a, source } => DriverMeta {
                lipschitz_z: T::zero(),
                lipschitz_y: a.abs(),
                mono_rate: MonoRate::Constant(a.max(T::zero())),
                f0_bound: source.as_ref().map_or(T::zero(), |s| s.1),
                sup_bound: None,
                source_only: *a == T::zero(),
            },
            Preset::SinZ { y_coef, z_coef, axis } => {
                if *axis >= dim {
                    problems.push(format!("sin_z axis {axis} outside dim {dim}"));
                }
                DriverMeta {
                    lipschitz_z: z_coef.abs(),
                    lipschitz_y: y_coef.abs(),
                    mono_rate: MonoRate::Constant(y_coef.max(T::zero())),
                    f0_bound: T::zero(),
                    sup_bound: None,
                    source_only: false,
                }
            }
            Preset::Cubic { coef } => {
                if *coef < T::zero() {
                    problems.push("cubic coefficient must be nonnegative".to_string());
                }
                DriverMeta {
                    lipschitz_z: T::zero(),
                    lipschitz_y: if *coef == T::zero() { T::zero() } else { T::infinity() },
                    mono_rate: MonoRate::Constant(T::zero()),
                    f0_bound: T::zero(),
                    sup_bound: None,
                    source_only: false,
                }
            }
            Preset::Table { y_poly, z_coefs, constant } => {
                if comps != 1 {
                    problems.push(format!("driver table is scalar but {comps} components requested"));
                }
                if z_coefs.len() != dim {
                    problems.push(format!("driver table has {} z coefficients for dim {dim}", z_coefs.len()));
                }
                let c1 = y_poly.get(1).copied().unwrap_or(T::zero());
                let nonlinear = y_poly.iter().skip(2).any(|c| *c != T::zero());
                DriverMeta {
                    lipschitz_z: crate::scalar::norm2(z_coefs),
                    lipschitz_y: if nonlinear { T::infinity() } else { c1.abs() },
                    mono_rate: MonoRate::Constant(c1.max(T::zero())),
                    f0_bound: (y_poly.first().copied().unwrap_or(T::zero()) + *constant).abs(),
                    sup_bound: None,
                    source_only: y_poly.iter().skip(1).all(|c| *c == T::zero())
                        && z_coefs.iter().all(|c| *c == T::zero()),
                }
            }
        };
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(PresetDriver { preset, comps, dim, meta })
    }

    pub fn into_ref(self) -> DriverRef<T> {
        Arc::new(self)
    }
}

impl<T: Real> Driver<T> for PresetDriver<T> {
    fn comps(&self) -> usize {
        self.comps
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn meta(&self) -> &DriverMeta<T> {
        &self.meta
    }

    fn name(&self) -> String {
        match &self.preset {
            Preset::Linear { .. } => "linear",
            Preset::SinZ { .. } => "sin_z",
            Preset::Cubic { .. } => "cubic_monotone",
            Preset::Table { .. } => "table",
        }
        .to_string()
    }

    fn eval(&self, t: T, x: &[T], y: &[T], z: &[T], out: &mut [T]) {
        match &self.preset {
            Preset::Linear { a, source } => {
                let g = source.as_ref().map_or(T::zero(), |s| (s.0)(t, x));
                for (o, &v) in out.iter_mut().zip(y) {
                    *o = *a * v + g;
                }
            }
            Preset::SinZ { y_coef, z_coef, axis } => {
                for c in 0..self.comps {
                    out[c] = *y_coef * y[c] + *z_coef * z[c * self.dim + axis].sin();
                }
            }
            Preset::Cubic { coef } => {
                let n2 = crate::scalar::dot(y, y);
                for (o, &v) in out.iter_mut().zip(y) {
                    *o = -*coef * n2 * v;
                }
            }
            Preset::Table { y_poly, z_coefs, constant } => {
                let mut acc = *constant;
                let mut p = T::one();
                for &c in y_poly {
                    acc += c * p;
                    p *= y[0];
                }
                acc += crate::scalar::dot(z_coefs, &z[..self.dim]);
                out[0] = acc;
            }
        }
    }

    fn growth_sup(&self, t: T, x: &[T], r: T) -> T {
        match &self.preset {
            Preset::Linear { a, .. } => a.abs() * r,
            Preset::SinZ { y_coef, .. } => y_coef.abs() * r,
            Preset::Cubic { coef } => *coef * r * r * r,
            Preset::Table { y_poly, .. } => {
                // |Σ_{k>=1} c_k y^k| <= Σ |c_k| r^k, attained for monomials
                let _ = (t, x);
                y_poly.iter().enumerate().skip(1).map(|(k, c)| c.abs() * r.powi(k as i32)).sum()
            }
        }
    }
}

/// Driver given by a closure.
#[derive(Clone)]
pub struct FnDriver<T> {
    name: String,
    comps: usize,
    dim: usize,
    meta: DriverMeta<T>,
    f: Arc<dyn Fn(T, &[T], &[T], &[T], &mut [T]) + Send + Sync>,
}

impl<T: Real> FnDriver<T> {
    pub fn new(
        name: impl Into<String>,
        comps: usize,
        dim: usize,
        meta: DriverMeta<T>,
        f: impl Fn(T, &[T], &[T], &[T], &mut [T]) + Send + Sync + 'static,
    ) -> Self {
        FnDriver { name: name.into(), comps, dim, meta, f: Arc::new(f) }
    }

    /// Pure source term `f(t, x)` with sup bound `bound`.
    pub fn source(comps: usize, dim: usize, bound: T, g: impl Fn(T, &[T], &mut [T]) + Send + Sync + 'static) -> Self {
        let meta = DriverMeta {
            lipschitz_z: T::zero(),
            lipschitz_y: T::zero(),
            mono_rate: MonoRate::Constant(T::zero()),
            f0_bound: bound,
            sup_bound: Some(bound),
            source_only: true,
        };
        FnDriver::new("source", comps, dim, meta, move |t, x, _y, _z, out| g(t, x, out))
    }

    pub fn into_ref(self) -> DriverRef<T> {
        Arc::new(self)
    }
}

impl<T: Real> Driver<T> for FnDriver<T> {
    fn comps(&self) -> usize {
        self.comps
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn meta(&self) -> &DriverMeta<T> {
        &self.meta
    }
    fn name(&self) -> String {
        self.name.clone()
    }
    fn eval(&self, t: T, x: &[T], y: &[T], z: &[T], out: &mut [T]) {
        (self.f)(t, x, y, z, out)
    }
}

/// `f*_t(y,z) = e^{α_t} f_t(e^{-α_t} y, e^{-α_t} z) - μ_t y`.
pub struct Gauged<T> {
    inner: DriverRef<T>,
    meta: DriverMeta<T>,
}

impl<T: Real> Gauged<T> {
    pub fn new(inner: DriverRef<T>, horizon: T) -> Self {
        let m = inner.meta();
        let rate = m.mono_rate.sup_positive(horizon);
        let growth = m.mono_rate.alpha(horizon).abs().exp();
        let meta = DriverMeta {
            lipschitz_z: m.lipschitz_z,
            lipschitz_y: m.lipschitz_y + rate,
            mono_rate: MonoRate::Constant(T::zero()),
            f0_bound: m.f0_bound * growth,
            sup_bound: None,
            source_only: m.source_only && m.mono_rate.is_zero(),
        };
        Gauged { inner, meta }
    }
}

impl<T: Real> Driver<T> for Gauged<T> {
    fn comps(&self) -> usize {
        self.inner.comps()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn meta(&self) -> &DriverMeta<T> {
        &self.meta
    }
    fn name(&self) -> String {
        format!("gauged({})", self.inner.name())
    }
    fn eval(&self, t: T, x: &[T], y: &[T], z: &[T], out: &mut [T]) {
        let rate = self.inner.meta().mono_rate.rate(t);
        let a = self.inner.meta().mono_rate.alpha(t);
        let (up, down) = (a.exp(), (-a).exp());
        let ys: Vec<T> = y.iter().map(|&v| v * down).collect();
        let zs: Vec<T> = z.iter().map(|&v| v * down).collect();
        self.inner.eval(t, x, &ys, &zs, out);
        for (o, &v) in out.iter_mut().zip(y) {
            *o = *o * up - rate * v;
        }
    }
}

/// Smooth bump `exp(-1/(1-|s|²))` on the unit ball of `R^l`, normalised to
/// unit mass on a tensor Gauss–Legendre rule with 16 points per axis.
#[derive(Debug, Clone)]
pub struct Mollifier<T> {
    pub dim: usize,
    pub points: Vec<T>,
    pub weights: Vec<T>,
    /// `∫ |∇φ|`.
    pub gradient_mass: T,
}

impl<T: Real> Mollifier<T> {
    pub const ORDER: usize = 16;

    pub fn new(l: usize) -> Self {
        let rule = gauss_legendre::<f64>(Self::ORDER);
        let q = Self::ORDER;
        let total = q.pow(l as u32);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut grad = 0.0f64;
        let mut s = vec![0.0f64; l];
        for m in 0..total {
            let mut rem = m;
            let mut w = 1.0;
            for a in (0..l).rev() {
                s[a] = rule.nodes[rem % q];
                w *= rule.weights[rem % q];
                rem /= q;
            }
            let r2: f64 = s.iter().map(|v| v * v).sum();
            if r2 >= 1.0 {
                continue;
            }
            let phi = (-1.0 / (1.0 - r2)).exp();
            // |∇φ| = φ · 2|s| / (1-|s|²)²
            grad += w * phi * 2.0 * r2.sqrt() / ((1.0 - r2) * (1.0 - r2));
            points.extend(s.iter().map(|&v| T::lit(v)));
            weights.push(w * phi);
        }
        let mass: f64 = weights.iter().sum();
        let weights = weights.iter().map(|&w| T::lit(w / mass)).collect();
        Mollifier { dim: l, points, weights, gradient_mass: T::lit(grad / mass) }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `f_n(y) = Σ_k w_k f(y - s_k / n)`.
pub struct Mollified<T> {
    inner: DriverRef<T>,
    n: T,
    kernel: Mollifier<T>,
    meta: DriverMeta<T>,
}

impl<T: Real> Driver<T> for Mollified<T> {
    fn comps(&self) -> usize {
        self.inner.comps()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn meta(&self) -> &DriverMeta<T> {
        &self.meta
    }
    fn name(&self) -> String {
        format!("mollified({}, n={})", self.inner.name(), self.n)
    }
    fn eval(&self, t: T, x: &[T], y: &[T], z: &[T], out: &mut [T]) {
        let l = self.comps();
        out.iter_mut().for_each(|o| *o = T::zero());
        let mut shifted = vec![T::zero(); l];
        let mut val = vec![T::zero(); l];
        for (k, &w) in self.kernel.weights.iter().enumerate() {
            for a in 0..l {
                shifted[a] = y[a] - self.kernel.points[k * l + a] / self.n;
            }
            self.inner.eval(t, x, &shifted, z, &mut val);
            for a in 0..l {
                out[a] += w * val[a];
            }
        }
    }
    fn growth_sup(&self, t: T, x: &[T], r: T) -> T {
        self.inner.growth_sup(t, x, r + T::one() / self.n) * T::lit(2.0)
    }
}

pub fn mollify_driver<T: Real>(driver: DriverRef<T>, n: T) -> Result<DriverRef<T>> {
    if !(n >= T::one()) {
        return Err(Error::Precondition(format!("mollification index {n} < 1")));
    }
    let kernel = Mollifier::new(driver.comps());
    let m = driver.meta();
    let from_bound = m.sup_bound.map_or(T::infinity(), |s| n * s * kernel.gradient_mass);
    let meta = DriverMeta {
        lipschitz_z: m.lipschitz_z,
        lipschitz_y: m.lipschitz_y.min(from_bound),
        mono_rate: m.mono_rate.clone(),
        f0_bound: m.sup_bound.unwrap_or(m.f0_bound).max(m.f0_bound),
        sup_bound: m.sup_bound,
        source_only: m.source_only,
    };
    Ok(Arc::new(Mollified { inner: driver, n, kernel, meta }))
}

/// `q_n(z) = z n / (|z| ∨ n)`.
pub fn q_n<T: Real>(z: &[T], n: T, out: &mut [T]) {
    let norm = crate::scalar::norm2(z);
    let s = n / norm.max(n);
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v * s;
    }
}

/// Smooth cutoff: 1 on `|y| <= r`, 0 on `|y| >= r + 1`.
pub fn theta_r<T: Real>(y: &[T], r: T) -> T {
    let s = crate::scalar::norm2(y) - r;
    if s <= T::zero() {
        return T::one();
    }
    if s >= T::one() {
        return T::zero();
    }
    let a = (-T::one() / s).exp();
    let b = (-T::one() / (T::one() - s)).exp();
    b / (a + b)
}

/// `h_n = θ_r(y) (f(y, q_n z) - f⁰) n / (f^{',r+1} ∨ n) + f⁰`.
pub struct Truncated<T> {
    inner: DriverRef<T>,
    r: T,
    n: T,
    meta: DriverMeta<T>,
}

impl<T: Real> Driver<T> for Truncated<T> {
    fn comps(&self) -> usize {
        self.inner.comps()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn meta(&self) -> &DriverMeta<T> {
        &self.meta
    }
    fn name(&self) -> String {
        format!("truncated({}, r={}, n={})", self.inner.name(), self.r, self.n)
    }
    fn eval(&self, t: T, x: &[T], y: &[T], z: &[T], out: &mut [T]) {
        let l = self.comps();
        let mut f0 = vec![T::zero(); l];
        self.inner.f0(t, x, &mut f0);
        let theta = theta_r(y, self.r);
        if theta == T::zero() {
            out.copy_from_slice(&f0);
            return;
        }
        let mut qz = vec![T::zero(); z.len()];
        q_n(z, self.n, &mut qz);
        self.inner.eval(t, x, y, &qz, out);
        let g = self.inner.growth_sup(t, x, self.r + T::one());
        let scale = self.n / g.max(self.n);
        for (o, &c) in out.iter_mut().zip(&f0) {
            *o = theta * (*o - c) * scale + c;
        }
    }
    fn growth_sup(&self, t: T, x: &[T], r: T) -> T {
        let g = self.inner.growth_sup(t, x, self.r + T::one());
        self.inner.growth_sup(t, x, r.min(self.r + T::one())) * self.n / g.max(self.n)
    }
}

pub fn truncate_driver<T: Real>(driver: DriverRef<T>, r: T, n: T) -> Result<DriverRef<T>> {
    if !(r >= T::one()) {
        return Err(Error::Precondition(format!("truncation radius {r} < 1")));
    }
    if !(n >= T::one()) {
        return Err(Error::Precondition(format!("truncation index {n} < 1")));
    }
    let m = driver.meta();
    let bound = (T::one() + m.lipschitz_z) * n + m.f0_bound;
    let meta = DriverMeta {
        lipschitz_z: m.lipschitz_z,
        lipschitz_y: T::infinity(),
        mono_rate: m.mono_rate.clone(),
        f0_bound: m.f0_bound,
        sup_bound: Some(bound),
        source_only: m.source_only,
    };
    Ok(Arc::new(Truncated { inner: driver, r, n, meta }))
}

#[derive(Debug, Clone, Serialize)]
pub struct DriverValidation {
    pub samples: usize,
    pub lipschitz_z_estimate: f64,
    pub lipschitz_z_declared: f64,
    /// Largest `⟨y-y', f(y)-f(y')⟩ - μ_t |y-y'|²`.
    pub worst_monotonicity_margin: f64,
    /// Largest `⟨y, f'(t,x,y)⟩`.
    pub worst_h2_prime: f64,
    /// `(r, max_x f^{',r})` on the sampled states.
    pub growth: Vec<(f64, f64)>,
    pub violations: Vec<String>,
}

impl DriverValidation {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Random-pair audit of the structural conditions of a driver.
pub fn validate_driver<T: Real>(driver: &dyn Driver<T>, horizon: T, samples: usize, seed: u64) -> DriverValidation {
    let (l, d) = (driver.comps(), driver.dim());
    let meta = driver.meta();
    let mut g = rng::stream(seed, salt::VALIDATE, 1);
    let mut draw =
        |scale: f64, n: usize| -> Vec<T> { (0..n).map(|_| rng::normal::<T, _>(&mut g) * T::lit(scale)).collect() };
    let mut lip = 0.0f64;
    let mut mono = f64::NEG_INFINITY;
    let mut h2p = f64::NEG_INFINITY;
    let (mut a, mut b, mut f0) = (vec![T::zero(); l], vec![T::zero(); l], vec![T::zero(); l]);
    let zero_z = vec![T::zero(); l * d];
    for k in 0..samples {
        let u: f64 = (k as f64 + 0.5) / samples as f64;
        let t = horizon * T::lit(u);
        let x = draw(1.0, d);
        let y = draw(1.5, l);
        let y2 = draw(1.5, l);
        let z = draw(1.5, l * d);
        // alternate far and near pairs so sup-type constants are approached
        let step = if k % 2 == 0 { 1.5 } else { 1e-4 };
        let dz = draw(step, l * d);
        let z2: Vec<T> = z.iter().zip(&dz).map(|(p, q)| *p + *q).collect();

        driver.eval(t, &x, &y, &z, &mut a);
        driver.eval(t, &x, &y, &z2, &mut b);
        let num: Vec<T> = a.iter().zip(&b).map(|(p, q)| *p - *q).collect();
        let den = crate::scalar::norm2(&dz).as_f64();
        if den > 0.0 {
            lip = lip.max(crate::scalar::norm2(&num).as_f64() / den);
        }

        driver.eval(t, &x, &y2, &z, &mut b);
        let dy: Vec<T> = y.iter().zip(&y2).map(|(p, q)| *p - *q).collect();
        let df: Vec<T> = a.iter().zip(&b).map(|(p, q)| *p - *q).collect();
        let margin = crate::scalar::dot(&dy, &df) - meta.mono_rate.rate(t) * crate::scalar::dot(&dy, &dy);
        mono = mono.max(margin.as_f64());

        driver.f0(t, &x, &mut f0);
        driver.eval(t, &x, &y, &zero_z, &mut a);
        let fp: Vec<T> = a.iter().zip(&f0).map(|(p, q)| *p - *q).collect();
        h2p = h2p.max(crate::scalar::dot(&y, &fp).as_f64());
    }
    let mut growth = Vec::new();
    for r in [0.5, 1.0, 2.0, 4.0] {
        let mut best = 0.0f64;
        for _ in 0..16 {
            let x = draw(1.0, d);
            best = best.max(driver.growth_sup(horizon * T::lit(0.5), &x, T::lit(r)).as_f64());
        }
        growth.push((r, best));
    }
    let mut violations = Vec::new();
    let declared = meta.lipschitz_z.as_f64();
    if lip > declared * (1.0 + 1e-6) + 1e-12 {
        violations.push(format!("z-Lipschitz estimate {lip} exceeds declared {declared}"));
    }
    if mono > 1e-8 {
        violations.push(format!("monotonicity margin {mono:e} > 0"));
    }
    DriverValidation {
        samples,
        lipschitz_z_estimate: lip,
        lipschitz_z_declared: declared,
        worst_monotonicity_margin: mono,
        worst_h2_prime: h2p,
        growth,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cubic() -> DriverRef<f64> {
        PresetDriver::new(Preset::Cubic { coef: 1.0 }, 1, 1).unwrap().into_ref()
    }

    #[test]
    fn mollifier_has_unit_mass_and_symmetry() {
        let m = Mollifier::<f64>::new(1);
        assert_abs_diff_eq!(m.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        let first: f64 = m.points.iter().zip(&m.weights).map(|(p, w)| p * w).sum();
        assert_abs_diff_eq!(first, 0.0, epsilon = 1e-15);
        // ∫|φ'| = 2 φ(0) / Z for the 1-d bump
        assert!(m.gradient_mass > 0.0);
    }

    #[test]
    fn mollify_examples() {
        let konst = FnDriver::source(1, 1, 2.0, |_, _, o| o[0] = 2.0).into_ref();
        let m = mollify_driver(konst, 3.0).unwrap();
        let mut o = [0.0];
        m.eval(0.0, &[0.0], &[0.7], &[0.0], &mut o);
        assert_abs_diff_eq!(o[0], 2.0, epsilon = 1e-14);

        let lin = PresetDriver::new(Preset::Linear { a: -1.5, source: None }, 1, 1).unwrap().into_ref();
        let m = mollify_driver(lin, 2.0).unwrap();
        for y in [-1.0, 0.3, 4.0] {
            m.eval(0.0, &[0.0], &[y], &[0.0], &mut o);
            assert_abs_diff_eq!(o[0], -1.5 * y, epsilon = 1e-10);
        }

        let abs = FnDriver::new(
            "abs",
            1,
            1,
            DriverMeta {
                lipschitz_z: 0.0,
                lipschitz_y: 1.0,
                mono_rate: MonoRate::Constant(1.0),
                f0_bound: 0.0,
                sup_bound: None,
                source_only: false,
            },
            |_, _, y: &[f64], _, o: &mut [f64]| o[0] = y[0].abs(),
        )
        .into_ref();
        let mut prev = f64::INFINITY;
        for n in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let m = mollify_driver(abs.clone(), n).unwrap();
            m.eval(0.0, &[0.0], &[0.0], &[0.0], &mut o);
            assert!(o[0] > 0.0 && o[0] < prev);
            prev = o[0];
        }
        assert!(mollify_driver(abs, 0.5).is_err());
    }

    #[test]
    fn q_n_examples() {
        let mut o = [0.0; 2];
        q_n(&[3.0, 4.0], 2.0, &mut o);
        assert_abs_diff_eq!(o[0], 1.2, epsilon = 1e-15);
        assert_abs_diff_eq!(o[1], 1.6, epsilon = 1e-15);
        q_n(&[0.3, -0.4], 2.0, &mut o);
        assert_eq!(o, [0.3, -0.4]);
    }

    #[test]
    fn theta_is_smooth_step() {
        assert_eq!(theta_r(&[0.9], 1.0), 1.0);
        assert_eq!(theta_r(&[2.0], 1.0), 0.0);
        assert_eq!(theta_r(&[-3.5], 1.0), 0.0);
        let mid = theta_r(&[1.5], 1.0);
        assert_abs_diff_eq!(mid, 0.5, epsilon = 1e-15);
        let mut prev = 1.0;
        for k in 0..=100 {
            let v = theta_r(&[1.0 + k as f64 / 100.0], 1.0);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn truncation_examples() {
        let src = FnDriver::source(1, 1, 0.5, |_, x: &[f64], o: &mut [f64]| o[0] = 0.5 * x[0].sin()).into_ref();
        let sin = PresetDriver::new(Preset::SinZ { y_coef: -1.0, z_coef: 0.5, axis: 0 }, 1, 1).unwrap().into_ref();
        let h = truncate_driver(cubic(), 2.0, 4.0).unwrap();
        let mut o = [0.0];
        h.eval(0.0, &[0.3], &[3.5], &[10.0], &mut o);
        assert_eq!(o[0], 0.0);
        let h = truncate_driver(src, 1.0, 1.0).unwrap();
        h.eval(0.0, &[0.3], &[9.0], &[0.0], &mut o);
        assert_abs_diff_eq!(o[0], 0.5 * 0.3f64.sin(), epsilon = 1e-15);
        let h = truncate_driver(sin.clone(), 3.0, 8.0).unwrap();
        let mut direct = [0.0];
        sin.eval(0.0, &[0.0], &[0.4], &[0.2], &mut direct);
        h.eval(0.0, &[0.0], &[0.4], &[0.2], &mut o);
        assert_abs_diff_eq!(o[0], direct[0], epsilon = 1e-15);
        assert!(truncate_driver(cubic(), 0.5, 4.0).is_err());
    }

    #[test]
    fn truncated_cubic_bounded() {
        let n = 4.0;
        let h = truncate_driver(cubic(), 2.0, n).unwrap();
        let mut o = [0.0];
        for k in -60..=60 {
            h.eval(0.0, &[0.0], &[k as f64 / 10.0], &[0.0], &mut o);
            assert!(o[0].abs() <= n + 1e-12);
        }
    }

    #[test]
    fn gauge_examples() {
        let lin = PresetDriver::new(Preset::Linear { a: 0.5, source: None }, 1, 1).unwrap().into_ref();
        let g = Gauged::new(lin, 1.0);
        assert!(g.meta().mono_rate.is_zero());
        let mut o = [0.0];
        g.eval(0.3, &[0.0], &[2.0], &[0.0], &mut o);
        // e^{α} (0.5 e^{-α} y) - 0.5 y = 0
        assert_abs_diff_eq!(o[0], 0.0, epsilon = 1e-14);
        let zero = PresetDriver::new(Preset::Cubic { coef: 1.0 }, 1, 1).unwrap().into_ref();
        let g = Gauged::new(zero.clone(), 1.0);
        let mut p = [0.0];
        g.eval(0.3, &[0.0], &[0.7], &[0.0], &mut o);
        zero.eval(0.3, &[0.0], &[0.7], &[0.0], &mut p);
        assert_eq!(o, p);
    }

    #[test]
    fn alpha_integrates_rate() {
        let r = MonoRate::<f64>::Function(Arc::new(|t| 2.0 * t));
        assert_abs_diff_eq!(r.alpha(1.5), 2.25, epsilon = 1e-12);
        assert_abs_diff_eq!(MonoRate::Constant(0.3).alpha(2.0), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn validation_examples() {
        let v = validate_driver(cubic().as_ref(), 1.0, 2000, 3);
        assert!(v.worst_h2_prime <= 0.0);
        assert!(v.ok());

        let sin = PresetDriver::new(Preset::SinZ { y_coef: 0.0, z_coef: 1.0, axis: 0 }, 1, 1).unwrap();
        let v = validate_driver(&sin, 1.0, 4000, 3);
        assert!(v.lipschitz_z_estimate <= 1.0 && v.lipschitz_z_estimate > 0.99, "{}", v.lipschitz_z_estimate);

        let sq =
            PresetDriver::new(Preset::Table { y_poly: vec![0.0, 0.0, 1.0], z_coefs: vec![0.0], constant: 0.0 }, 1, 1)
                .unwrap();
        let v = validate_driver(&sq, 1.0, 500, 3);
        assert!(v.worst_monotonicity_margin > 0.0);
        assert!(!v.ok());
    }

    #[test]
    fn growth_sup_default_matches_closed_form() {
        let fd = FnDriver::new(
            "cubic",
            1,
            1,
            DriverMeta {
                lipschitz_z: 0.0,
                lipschitz_y: f64::INFINITY,
                mono_rate: MonoRate::Constant(0.0),
                f0_bound: 0.0,
                sup_bound: None,
                source_only: false,
            },
            |_, _, y, _, o| o[0] = -y[0] * y[0] * y[0],
        );
        assert_abs_diff_eq!(fd.growth_sup(0.0, &[0.0], 2.0), 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cubic().growth_sup(0.0, &[0.0], 2.0), 8.0, epsilon = 1e-12);
    }
}
