//! Finite-dimensional truncation of the state space: a centred Gaussian
//! reference measure with diagonal covariance, tensor Gauss–Hermite nodes,
//! spectral gradients, and the quadratic forms built on them.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, symmetric_sqrt};
use crate::quadrature::{barycentric_weights, differentiation_matrix, gauss_hermite, lagrange_row};
use crate::Real;

/// Largest supported number of retained directions.
pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone)]
pub struct Axis<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
    pub variance: T,
    bary: Vec<T>,
    diff: Vec<T>,
}

impl<T: Real> Axis<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Lagrange cardinal values at `x`.
    pub fn cardinal_row(&self, x: T, out: &mut [T]) {
        lagrange_row(&self.nodes, &self.bary, x, out);
    }

    /// Row-major differentiation matrix.
    pub fn diff_matrix(&self) -> &[T] {
        &self.diff
    }
}

/// Tensor quadrature grid for `N(0, diag(variances))`.
#[derive(Debug, Clone)]
pub struct TruncatedSpace<T> {
    dim: usize,
    quad_order: usize,
    axes: Vec<Axis<T>>,
    nodes: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> TruncatedSpace<T> {
    pub fn build(dim: usize, axis_variances: &[T], quad_order: usize) -> Result<Self> {
        let mut problems = Vec::new();
        if dim == 0 {
            problems.push("dim must be at least 1".to_string());
        }
        if dim > MAX_DIM {
            problems.push(format!("dim {dim} exceeds the supported maximum {MAX_DIM}"));
        }
        if axis_variances.len() != dim {
            problems.push(format!("{} variances given for dim {dim}", axis_variances.len()));
        }
        if let Some(v) = axis_variances.iter().find(|v| !(**v > T::zero()) || !v.is_finite()) {
            problems.push(format!("variance {v} is not a positive finite number"));
        }
        if quad_order < 2 {
            problems.push(format!("quad_order {quad_order} < 2"));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }

        let rule = gauss_hermite::<T>(quad_order);
        let axes: Vec<Axis<T>> = axis_variances
            .iter()
            .map(|&var| {
                let sd = var.sqrt();
                let nodes: Vec<T> = rule.nodes.iter().map(|&z| z * sd).collect();
                let bary = barycentric_weights(&nodes);
                let diff = differentiation_matrix(&nodes, &bary);
                Axis { nodes, weights: rule.weights.clone(), variance: var, bary, diff }
            })
            .collect();

        let n = quad_order.pow(dim as u32);
        let mut nodes = vec![T::zero(); n * dim];
        let mut weights = vec![T::one(); n];
        for idx in 0..n {
            let mut rem = idx;
            for a in (0..dim).rev() {
                let i = rem % quad_order;
                rem /= quad_order;
                nodes[idx * dim + a] = axes[a].nodes[i];
                weights[idx] *= axes[a].weights[i];
            }
        }
        Ok(TruncatedSpace { dim, quad_order, axes, nodes, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn quad_order(&self) -> usize {
        self.quad_order
    }

    pub fn n_nodes(&self) -> usize {
        self.weights.len()
    }

    pub fn axes(&self) -> &[Axis<T>] {
        &self.axes
    }

    pub fn variances(&self) -> Vec<T> {
        self.axes.iter().map(|a| a.variance).collect()
    }

    pub fn node(&self, i: usize) -> &[T] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    fn stride(&self, axis: usize) -> usize {
        self.quad_order.pow((self.dim - 1 - axis) as u32)
    }

    /// Index of `node` along `axis`.
    pub fn axis_index(&self, node: usize, axis: usize) -> usize {
        (node / self.stride(axis)) % self.quad_order
    }

    /// Sample a function at every node.
    pub fn sample<F>(&self, comps: usize, mut f: F) -> Field<T>
    where
        F: FnMut(&[T], &mut [T]),
    {
        let mut values = vec![T::zero(); self.n_nodes() * comps];
        for (i, chunk) in values.chunks_mut(comps).enumerate() {
            f(self.node(i), chunk);
        }
        Field { comps, values }
    }

    /// Scalar convenience wrapper around [`TruncatedSpace::sample`].
    pub fn sample_scalar<F: Fn(&[T]) -> T>(&self, f: F) -> Field<T> {
        self.sample(1, |x, out| out[0] = f(x))
    }

    pub fn check_field(&self, field: &Field<T>) -> Result<()> {
        if field.comps == 0 || field.values.len() != self.n_nodes() * field.comps {
            return Err(Error::Shape(format!(
                "field has {} values for {} components, grid has {} nodes",
                field.values.len(),
                field.comps,
                self.n_nodes()
            )));
        }
        Ok(())
    }

    /// Componentwise `∫ u dμ`.
    pub fn integrate(&self, field: &Field<T>) -> Vec<T> {
        let mut out = vec![T::zero(); field.comps];
        for (w, chunk) in self.weights.iter().zip(field.values.chunks(field.comps)) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += *w * v;
            }
        }
        out
    }

    /// `(u, v)` in `L²(μ; R^l)`.
    pub fn inner(&self, u: &Field<T>, v: &Field<T>) -> T {
        let l = u.comps;
        let mut acc = T::zero();
        for (i, w) in self.weights.iter().enumerate() {
            let a = &u.values[i * l..(i + 1) * l];
            let b = &v.values[i * l..(i + 1) * l];
            acc += *w * crate::scalar::dot(a, b);
        }
        acc
    }

    pub fn norm_sq(&self, u: &Field<T>) -> T {
        self.inner(u, u)
    }

    /// Apply a `q x q` matrix along one tensor axis.
    pub fn apply_axis(&self, values: &[T], comps: usize, axis: usize, matrix: &[T]) -> Vec<T> {
        let q = self.quad_order;
        let stride = self.stride(axis);
        let mut out = vec![T::zero(); values.len()];
        for node in 0..self.n_nodes() {
            let i = (node / stride) % q;
            let base = node - i * stride;
            let row = &matrix[i * q..(i + 1) * q];
            for c in 0..comps {
                let mut acc = T::zero();
                for (j, &m) in row.iter().enumerate() {
                    acc += m * values[(base + j * stride) * comps + c];
                }
                out[node * comps + c] = acc;
            }
        }
        out
    }

    /// Nodal gradient of the tensor interpolant.
    pub fn gradient(&self, field: &Field<T>) -> Result<Gradient<T>> {
        self.check_field(field)?;
        let (l, d) = (field.comps, self.dim);
        let mut values = vec![T::zero(); self.n_nodes() * l * d];
        for a in 0..d {
            let part = self.apply_axis(&field.values, l, a, &self.axes[a].diff);
            for node in 0..self.n_nodes() {
                for c in 0..l {
                    values[(node * l + c) * d + a] = part[node * l + c];
                }
            }
        }
        Ok(Gradient { comps: l, dim: d, values })
    }

    /// Per-axis cardinal rows at `x` (each of length `quad_order`).
    pub fn cardinal_rows(&self, x: &[T]) -> Vec<Vec<T>> {
        self.axes
            .iter()
            .zip(x)
            .map(|(ax, &xa)| {
                let mut row = vec![T::zero(); self.quad_order];
                ax.cardinal_row(xa, &mut row);
                row
            })
            .collect()
    }

    /// Evaluate the tensor interpolant of `values` (with `comps` components) at `x`.
    pub fn interpolate(&self, values: &[T], comps: usize, x: &[T], out: &mut [T]) {
        let rows = self.cardinal_rows(x);
        self.interpolate_with_rows(values, comps, &rows, out);
    }

    /// Interpolation with rows from [`Self::cardinal_rows`], for reuse across fields at one point.
    pub fn interpolate_with_rows(&self, values: &[T], comps: usize, rows: &[Vec<T>], out: &mut [T]) {
        let q = self.quad_order;
        out.iter_mut().for_each(|o| *o = T::zero());
        match self.dim {
            1 => {
                for (j, &r) in rows[0].iter().enumerate() {
                    for c in 0..comps {
                        out[c] += r * values[j * comps + c];
                    }
                }
            }
            _ => {
                for node in 0..self.n_nodes() {
                    let mut w = T::one();
                    let mut rem = node;
                    for a in (0..self.dim).rev() {
                        w *= rows[a][rem % q];
                        rem /= q;
                    }
                    if w != T::zero() {
                        for c in 0..comps {
                            out[c] += w * values[node * comps + c];
                        }
                    }
                }
            }
        }
    }
}

/// `R^l`-valued samples at the grid nodes, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    pub comps: usize,
    pub values: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn zeros(n_nodes: usize, comps: usize) -> Self {
        Field { comps, values: vec![T::zero(); n_nodes * comps] }
    }

    pub fn n_nodes(&self) -> usize {
        self.values.len() / self.comps.max(1)
    }

    pub fn at(&self, node: usize) -> &[T] {
        &self.values[node * self.comps..(node + 1) * self.comps]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Field { comps: self.comps, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Field { comps: self.comps, values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn sup_norm(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Pointwise Euclidean norm across components.
    pub fn pointwise_norm(&self) -> Field<T> {
        Field { comps: 1, values: self.values.chunks(self.comps).map(crate::scalar::norm2).collect() }
    }

    pub fn min_value(&self) -> T {
        self.values.iter().fold(T::infinity(), |m, &v| m.min(v))
    }
}

/// A field per time node on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField<T> {
    pub times: Vec<T>,
    pub slices: Vec<Field<T>>,
}

impl<T: Real> SpaceTimeField<T> {
    pub fn new(times: Vec<T>, slices: Vec<Field<T>>) -> Result<Self> {
        if times.len() != slices.len() || slices.is_empty() {
            return Err(Error::Shape(format!("{} times for {} slices", times.len(), slices.len())));
        }
        let (n, c) = (slices[0].values.len(), slices[0].comps);
        if slices.iter().any(|s| s.values.len() != n || s.comps != c) {
            return Err(Error::Shape("slices disagree in shape".into()));
        }
        Ok(SpaceTimeField { times, slices })
    }

    pub fn comps(&self) -> usize {
        self.slices[0].comps
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> T {
        *self.times.last().unwrap()
    }

    pub fn dt(&self) -> T {
        if self.times.len() < 2 {
            T::zero()
        } else {
            self.times[1] - self.times[0]
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        SpaceTimeField {
            times: self.times.clone(),
            slices: self.slices.iter().zip(&other.slices).map(|(a, b)| a.zip_map(b, |x, y| x - y)).collect(),
        }
    }

    pub fn sup_norm(&self) -> T {
        self.slices.iter().fold(T::zero(), |m, s| m.max(s.sup_norm()))
    }
}

/// Nodal gradients, laid out `[(node * comps + c) * dim + axis]`.
#[derive(Debug, Clone)]
pub struct Gradient<T> {
    pub comps: usize,
    pub dim: usize,
    pub values: Vec<T>,
}

impl<T: Real> Gradient<T> {
    /// The `comps x dim` block at `node`.
    pub fn at(&self, node: usize) -> &[T] {
        let b = self.comps * self.dim;
        &self.values[node * b..(node + 1) * b]
    }

    /// Nodal values as a field with `comps * dim` components (for interpolation).
    pub fn as_field(&self) -> Field<T> {
        Field { comps: self.comps * self.dim, values: self.values.clone() }
    }
}

type MatrixFn<T> = Arc<dyn Fn(&[T], &mut [T]) + Send + Sync>;

#[derive(Clone)]
enum DiffusionKind<T> {
    ConstantDiagonal(Vec<T>),
    Function(MatrixFn<T>),
}

/// Symmetric uniformly elliptic coefficient `A(x)`, `c I <= A(x) <= C1 I`.
#[derive(Clone)]
pub struct DiffusionCoefficient<T> {
    dim: usize,
    kind: DiffusionKind<T>,
    lower: T,
    upper: T,
}

impl<T: Real> std::fmt::Debug for DiffusionCoefficient<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionCoefficient")
            .field("dim", &self.dim)
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .finish()
    }
}

impl<T: Real> DiffusionCoefficient<T> {
    pub fn constant_diagonal(diag: Vec<T>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::config("empty diffusion diagonal"));
        }
        let lower = diag.iter().fold(T::infinity(), |m, &v| m.min(v));
        let upper = diag.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if !(lower > T::zero()) {
            return Err(Error::config(format!(
                "degenerate diffusion (smallest eigenvalue {lower}); uniform ellipticity is required"
            )));
        }
        Ok(DiffusionCoefficient { dim: diag.len(), kind: DiffusionKind::ConstantDiagonal(diag), lower, upper })
    }

    pub fn isotropic(dim: usize, a: T) -> Result<Self> {
        Self::constant_diagonal(vec![a; dim])
    }

    /// State-dependent coefficient. `f(x, out)` writes the row-major `d x d`
    /// matrix. `lower`/`upper` are the claimed ellipticity bounds; they are
    /// audited by [`DiffusionCoefficient::check_on`].
    pub fn from_fn<F>(dim: usize, lower: T, upper: T, f: F) -> Result<Self>
    where
        F: Fn(&[T], &mut [T]) + Send + Sync + 'static,
    {
        if !(lower > T::zero()) || upper < lower {
            return Err(Error::config(format!("ellipticity bounds ({lower}, {upper}) must satisfy 0 < c <= C1")));
        }
        Ok(DiffusionCoefficient { dim, kind: DiffusionKind::Function(Arc::new(f)), lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self) -> (T, T) {
        (self.lower, self.upper)
    }

    pub fn constant_diag(&self) -> Option<&[T]> {
        match &self.kind {
            DiffusionKind::ConstantDiagonal(d) => Some(d),
            DiffusionKind::Function(_) => None,
        }
    }

    pub fn matrix_at(&self, x: &[T], out: &mut [T]) {
        match &self.kind {
            DiffusionKind::ConstantDiagonal(diag) => {
                out.iter_mut().for_each(|o| *o = T::zero());
                for (i, &a) in diag.iter().enumerate() {
                    out[i * self.dim + i] = a;
                }
            }
            DiffusionKind::Function(f) => f(x, out),
        }
    }

    /// `A^{1/2}(x)`.
    pub fn sqrt_at(&self, x: &[T], out: &mut [T]) {
        match &self.kind {
            DiffusionKind::ConstantDiagonal(diag) => {
                out.iter_mut().for_each(|o| *o = T::zero());
                for (i, &a) in diag.iter().enumerate() {
                    out[i * self.dim + i] = a.sqrt();
                }
            }
            DiffusionKind::Function(_) => {
                let mut m = vec![T::zero(); self.dim * self.dim];
                self.matrix_at(x, &mut m);
                out.copy_from_slice(&symmetric_sqrt(&m, self.dim));
            }
        }
    }

    /// Symmetry and eigenvalue audit at every grid node.
    pub fn check_on(&self, space: &TruncatedSpace<T>) -> Result<EllipticityReport> {
        if space.dim() != self.dim {
            return Err(Error::Shape(format!("diffusion dim {} vs space dim {}", self.dim, space.dim())));
        }
        let d = self.dim;
        let mut m = vec![T::zero(); d * d];
        let mut asym = 0.0f64;
        let mut min_eig = f64::INFINITY;
        let mut max_eig = f64::NEG_INFINITY;
        for i in 0..space.n_nodes() {
            self.matrix_at(space.node(i), &mut m);
            for r in 0..d {
                for c in 0..d {
                    asym = asym.max((m[r * d + c] - m[c * d + r]).abs().as_f64());
                }
            }
            let (vals, _) = symmetric_eigen(&m, d);
            min_eig = min_eig.min(vals[0].as_f64());
            max_eig = max_eig.max(vals[d - 1].as_f64());
        }
        let slack = 1e-12 * self.upper.as_f64().max(1.0);
        let report = EllipticityReport {
            max_asymmetry: asym,
            min_eigenvalue: min_eig,
            max_eigenvalue: max_eig,
            claimed_lower: self.lower.as_f64(),
            claimed_upper: self.upper.as_f64(),
        };
        if asym != 0.0 {
            return Err(Error::Precondition(format!("A(x) not symmetric (max |A_ij - A_ji| = {asym:e})")));
        }
        if min_eig < report.claimed_lower - slack || max_eig > report.claimed_upper + slack {
            return Err(Error::Precondition(format!(
                "eigenvalues [{min_eig}, {max_eig}] outside claimed bounds [{}, {}]",
                report.claimed_lower, report.claimed_upper
            )));
        }
        Ok(report)
    }

    /// Matrices and square roots at every node, cached for repeated use.
    pub fn nodal(&self, space: &TruncatedSpace<T>) -> NodalDiffusion<T> {
        let d = self.dim;
        let n = space.n_nodes();
        let mut mats = vec![T::zero(); n * d * d];
        let mut sqrts = vec![T::zero(); n * d * d];
        for i in 0..n {
            self.matrix_at(space.node(i), &mut mats[i * d * d..(i + 1) * d * d]);
            self.sqrt_at(space.node(i), &mut sqrts[i * d * d..(i + 1) * d * d]);
        }
        NodalDiffusion { dim: d, mats, sqrts }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EllipticityReport {
    pub max_asymmetry: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub claimed_lower: f64,
    pub claimed_upper: f64,
}

#[derive(Debug, Clone)]
pub struct NodalDiffusion<T> {
    dim: usize,
    mats: Vec<T>,
    sqrts: Vec<T>,
}

impl<T: Real> NodalDiffusion<T> {
    pub fn matrix(&self, node: usize) -> &[T] {
        let b = self.dim * self.dim;
        &self.mats[node * b..(node + 1) * b]
    }

    pub fn sqrt(&self, node: usize) -> &[T] {
        let b = self.dim * self.dim;
        &self.sqrts[node * b..(node + 1) * b]
    }

    /// `z = A^{1/2} g` row by row for an `l x d` gradient block.
    pub fn scaled_gradient(&self, node: usize, grad: &[T], out: &mut [T]) {
        apply_rows(self.sqrt(node), self.dim, grad, out);
    }
}

/// `out[c] = M g[c]` for each length-`d` row `g[c]` of a row-major block.
pub(crate) fn apply_rows<T: Real>(m: &[T], d: usize, block: &[T], out: &mut [T]) {
    for (g, o) in block.chunks(d).zip(out.chunks_mut(d)) {
        for r in 0..d {
            let mut acc = T::zero();
            for c in 0..d {
                acc += m[r * d + c] * g[c];
            }
            o[r] = acc;
        }
    }
}

/// Drift `b(x)` of the non-symmetric part together with its sector constant α.
#[derive(Clone)]
pub struct DriftField<T> {
    dim: usize,
    eval: Option<MatrixFn<T>>,
    pub sector_alpha: T,
}

impl<T: Real> std::fmt::Debug for DriftField<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriftField")
            .field("dim", &self.dim)
            .field("zero", &self.eval.is_none())
            .field("sector_alpha", &self.sector_alpha)
            .finish()
    }
}

impl<T: Real> DriftField<T> {
    pub fn zero(dim: usize) -> Self {
        DriftField { dim, eval: None, sector_alpha: T::zero() }
    }

    pub fn from_fn<F>(dim: usize, sector_alpha: T, f: F) -> Self
    where
        F: Fn(&[T], &mut [T]) + Send + Sync + 'static,
    {
        DriftField { dim, eval: Some(Arc::new(f)), sector_alpha }
    }

    pub fn is_zero(&self) -> bool {
        self.eval.is_none()
    }

    pub fn at(&self, x: &[T], out: &mut [T]) {
        match &self.eval {
            None => out.iter_mut().for_each(|o| *o = T::zero()),
            Some(f) => f(x, out),
        }
    }

    /// `∫ |A^{1/2} b|² dμ`; errors when the quadrature value is not finite.
    pub fn square_integral(&self, space: &TruncatedSpace<T>, a: &DiffusionCoefficient<T>) -> Result<T> {
        let d = self.dim;
        let mut b = vec![T::zero(); d];
        let mut s = vec![T::zero(); d * d];
        let mut sb = vec![T::zero(); d];
        let mut acc = T::zero();
        for i in 0..space.n_nodes() {
            let x = space.node(i);
            self.at(x, &mut b);
            a.sqrt_at(x, &mut s);
            apply_rows(&s, d, &b, &mut sb);
            acc += space.weights()[i] * crate::scalar::dot(&sb, &sb);
        }
        if !acc.is_finite() {
            return Err(Error::Precondition("A^{1/2} b is not square integrable on the grid".into()));
        }
        Ok(acc)
    }
}

fn check_pair<T: Real>(space: &TruncatedSpace<T>, u: &Field<T>, v: &Field<T>) -> Result<()> {
    space.check_field(u)?;
    space.check_field(v)?;
    if u.comps != v.comps {
        return Err(Error::Shape(format!("{} vs {} components", u.comps, v.comps)));
    }
    Ok(())
}

/// Density `⟨A ∇u, ∇v⟩` summed over components, written so that swapping
/// `u` and `v` reproduces the same floating-point value.
fn energy_density<T: Real>(a: &[T], d: usize, gu: &[T], gv: &[T]) -> T {
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for (u, v) in gu.chunks(d).zip(gv.chunks(d)) {
        for i in 0..d {
            for j in 0..d {
                acc += a[i * d + j] * (u[i] * v[j] + u[j] * v[i]) * half;
            }
        }
    }
    acc
}

/// `ℰ^A(u, v) = ∫ ⟨A ∇u, ∇v⟩ dμ`.
pub fn energy_form<T: Real>(
    space: &TruncatedSpace<T>,
    a: &DiffusionCoefficient<T>,
    u: &Field<T>,
    v: &Field<T>,
) -> Result<T> {
    check_pair(space, u, v)?;
    let nodal = a.nodal(space);
    let gu = space.gradient(u)?;
    let gv = space.gradient(v)?;
    Ok(energy_with(space, &nodal, &gu, &gv))
}

pub(crate) fn energy_with<T: Real>(
    space: &TruncatedSpace<T>,
    nodal: &NodalDiffusion<T>,
    gu: &Gradient<T>,
    gv: &Gradient<T>,
) -> T {
    let d = space.dim();
    let mut acc = T::zero();
    for (i, &w) in space.weights().iter().enumerate() {
        acc += w * energy_density(nodal.matrix(i), d, gu.at(i), gv.at(i));
    }
    acc
}

/// `ℰ(u, v) = ℰ^A(u, v) + ∫ ⟨A b, ∇u⟩ v dμ`.
pub fn bilinear_form<T: Real>(
    space: &TruncatedSpace<T>,
    a: &DiffusionCoefficient<T>,
    b: &DriftField<T>,
    u: &Field<T>,
    v: &Field<T>,
) -> Result<T> {
    let sym = energy_form(space, a, u, v)?;
    if b.is_zero() {
        return Ok(sym);
    }
    let gu = space.gradient(u)?;
    Ok(sym + drift_term(space, a, b, &gu, v))
}

/// `∫ ⟨A b, ∇u⟩ v dμ` given the nodal gradient of `u`.
fn drift_term<T: Real>(
    space: &TruncatedSpace<T>,
    a: &DiffusionCoefficient<T>,
    b: &DriftField<T>,
    gu: &Gradient<T>,
    v: &Field<T>,
) -> T {
    let d = space.dim();
    let l = v.comps;
    let mut m = vec![T::zero(); d * d];
    let mut bx = vec![T::zero(); d];
    let mut ab = vec![T::zero(); d];
    let mut acc = T::zero();
    for i in 0..space.n_nodes() {
        let x = space.node(i);
        a.matrix_at(x, &mut m);
        b.at(x, &mut bx);
        apply_rows(&m, d, &bx, &mut ab);
        let g = gu.at(i);
        let vi = v.at(i);
        let mut local = T::zero();
        for c in 0..l {
            local += crate::scalar::dot(&ab, &g[c * d..(c + 1) * d]) * vi[c];
        }
        acc += space.weights()[i] * local;
    }
    acc
}

#[derive(Debug, Clone, Serialize)]
pub struct SectorReport {
    /// `∫⟨Ab, ∇u²⟩dμ + α‖u‖²` per test field.
    pub margins: Vec<f64>,
    pub alpha: f64,
    pub violations: Vec<usize>,
}

impl SectorReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Audit `∫⟨A b, ∇(u²)⟩ dμ ≥ -α ‖u‖²` on nonnegative test fields.
pub fn check_drift_sector<T: Real>(
    space: &TruncatedSpace<T>,
    a: &DiffusionCoefficient<T>,
    b: &DriftField<T>,
    alpha: T,
    tests: &[Field<T>],
) -> Result<SectorReport> {
    let mut margins = Vec::with_capacity(tests.len());
    let mut violations = Vec::new();
    for (k, u) in tests.iter().enumerate() {
        space.check_field(u)?;
        if u.values.iter().any(|&v| v < T::zero()) {
            return Err(Error::Precondition(format!("test field {k} is negative somewhere")));
        }
        let sq = u.map(|v| v * v);
        let gsq = space.gradient(&sq)?;
        let ones = Field { comps: u.comps, values: vec![T::one(); u.values.len()] };
        let lhs = drift_term(space, a, b, &gsq, &ones);
        let margin = (lhs + alpha * space.norm_sq(u)).as_f64();
        if margin < -1e-10 {
            violations.push(k);
        }
        margins.push(margin);
    }
    Ok(SectorReport { margins, alpha: alpha.as_f64(), violations })
}

/// `(sup_t ‖u_t‖² + ∫_0^T ℰ^A(u_t) dt)^{1/2}` with the trapezoid rule in time.
pub fn t_norm<T: Real>(space: &TruncatedSpace<T>, a: &DiffusionCoefficient<T>, field: &SpaceTimeField<T>) -> Result<T> {
    let nodal = a.nodal(space);
    t_norm_with(space, &nodal, field)
}

pub(crate) fn t_norm_with<T: Real>(
    space: &TruncatedSpace<T>,
    nodal: &NodalDiffusion<T>,
    field: &SpaceTimeField<T>,
) -> Result<T> {
    let mut sup = T::zero();
    let mut energies = Vec::with_capacity(field.slices.len());
    for s in &field.slices {
        space.check_field(s)?;
        sup = sup.max(space.norm_sq(s));
        let g = space.gradient(s)?;
        energies.push(energy_with(space, nodal, &g, &g));
    }
    Ok((sup + trapezoid(&energies, field.dt())).sqrt())
}

/// Composite trapezoid on a uniform grid.
pub fn trapezoid<T: Real>(values: &[T], dt: T) -> T {
    match values.len() {
        0 | 1 => T::zero(),
        n => {
            let inner: T = values[1..n - 1].iter().copied().sum();
            dt * (inner + (values[0] + values[n - 1]) * T::lit(0.5))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line() -> TruncatedSpace<f64> {
        TruncatedSpace::build(1, &[0.5], 20).unwrap()
    }

    #[test]
    fn build_counts_and_normalisation() {
        let s = line();
        assert_eq!(s.n_nodes(), 20);
        assert_abs_diff_eq!(s.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(s.weights().iter().all(|&w| w > 0.0));
        let s2 = TruncatedSpace::<f64>::build(2, &[0.5, 0.5], 10).unwrap();
        assert_eq!(s2.n_nodes(), 100);
        assert_abs_diff_eq!(s2.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn second_moment_of_reference_measure() {
        let s = line();
        let f = s.sample_scalar(|x| x[0] * x[0]);
        assert_abs_diff_eq!(s.integrate(&f)[0], 0.5, epsilon = 1e-10);
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(matches!(TruncatedSpace::<f64>::build(1, &[-0.5], 20), Err(Error::Config(_))));
        assert!(matches!(TruncatedSpace::<f64>::build(1, &[0.5], 1), Err(Error::Config(_))));
        assert!(matches!(TruncatedSpace::<f64>::build(4, &[1.0; 4], 4), Err(Error::Config(_))));
        match TruncatedSpace::<f64>::build(2, &[0.0], 1) {
            Err(Error::Config(list)) => assert!(list.len() >= 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gradient_examples() {
        let s = line();
        // differentiation roundoff grows towards the outermost nodes
        let g = s.gradient(&s.sample_scalar(|x| x[0])).unwrap();
        assert!(g.values.iter().all(|v| (v - 1.0).abs() < 1e-7));
        assert!(s.norm_sq(&g.as_field().map(|v| v - 1.0)) < 1e-24);
        let g = s.gradient(&s.sample_scalar(|_| 3.0)).unwrap();
        assert!(g.values.iter().all(|v| v.abs() < 1e-7));
        let g = s.gradient(&s.sample_scalar(|x| x[0] * x[0])).unwrap();
        for i in 0..s.n_nodes() {
            assert!((g.values[i] - 2.0 * s.node(i)[0]).abs() <= 1e-7);
        }
    }

    #[test]
    fn gradient_shape_error() {
        let s = line();
        let bad = Field { comps: 1, values: vec![0.0; 7] };
        assert!(matches!(s.gradient(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn energy_form_examples() {
        let s = line();
        let a = DiffusionCoefficient::isotropic(1, 0.5).unwrap();
        let x = s.sample_scalar(|x| x[0]);
        let x2 = s.sample_scalar(|x| x[0] * x[0]);
        let c = s.sample_scalar(|_| 2.0);
        assert_abs_diff_eq!(energy_form(&s, &a, &x, &x).unwrap(), 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(energy_form(&s, &a, &c, &c).unwrap(), 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(energy_form(&s, &a, &x2, &x).unwrap(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn bilinear_form_examples() {
        let s = line();
        let a = DiffusionCoefficient::isotropic(1, 0.5).unwrap();
        let x = s.sample_scalar(|x| x[0]);
        let one = s.sample_scalar(|_| 1.0);
        let zero_b = DriftField::zero(1);
        let lin_b = DriftField::from_fn(1, 0.0, |x: &[f64], o: &mut [f64]| o[0] = x[0]);
        assert_eq!(bilinear_form(&s, &a, &zero_b, &x, &x).unwrap(), energy_form(&s, &a, &x, &x).unwrap());
        // energy part of (x, 1) vanishes, drift part is 0.5 E[x] = 0
        assert_abs_diff_eq!(bilinear_form(&s, &a, &lin_b, &x, &one).unwrap(), 0.0, epsilon = 1e-10);
        // 0.5 + 0.5 E[x^2] = 0.5 + 0.25
        assert_abs_diff_eq!(bilinear_form(&s, &a, &lin_b, &x, &x).unwrap(), 0.75, epsilon = 1e-10);
    }

    #[test]
    fn degenerate_diffusion_rejected() {
        assert!(DiffusionCoefficient::<f64>::constant_diagonal(vec![0.5, 0.0]).is_err());
        assert!(DiffusionCoefficient::<f64>::from_fn(1, 0.0, 1.0, |_, o| o[0] = 1.0).is_err());
    }

    #[test]
    fn ellipticity_audit_catches_false_bounds() {
        let s = TruncatedSpace::<f64>::build(2, &[0.5, 0.5], 6).unwrap();
        let good = DiffusionCoefficient::from_fn(2, 0.25, 1.0, |x: &[f64], m: &mut [f64]| {
            let off = 0.1 * x[0].tanh();
            m.copy_from_slice(&[0.5, off, off, 0.5]);
        })
        .unwrap();
        assert!(good.check_on(&s).is_ok());
        let lying = DiffusionCoefficient::from_fn(2, 0.45, 1.0, |x: &[f64], m: &mut [f64]| {
            let off = 0.1 * x[0].tanh();
            m.copy_from_slice(&[0.5, off, off, 0.5]);
        })
        .unwrap();
        assert!(lying.check_on(&s).is_err());
        let asym = DiffusionCoefficient::from_fn(2, 0.1, 2.0, |_: &[f64], m: &mut [f64]| {
            m.copy_from_slice(&[1.0, 0.1, 0.0, 1.0]);
        })
        .unwrap();
        assert!(asym.check_on(&s).is_err());
    }

    #[test]
    fn sector_examples() {
        let s = line();
        let a = DiffusionCoefficient::isotropic(1, 0.5).unwrap();
        let tests = vec![s.sample_scalar(|x| (-x[0] * x[0]).exp()), s.sample_scalar(|_| 1.0)];
        let rep = check_drift_sector(&s, &a, &DriftField::zero(1), 0.3, &tests).unwrap();
        assert!(rep.holds());
        assert!(rep.margins.iter().all(|&m| m >= 0.0));
        assert_abs_diff_eq!(rep.margins[1], 0.3, epsilon = 1e-12);

        let neg = vec![s.sample_scalar(|x| x[0])];
        assert!(matches!(check_drift_sector(&s, &a, &DriftField::zero(1), 0.0, &neg), Err(Error::Precondition(_))));
    }

    #[test]
    fn t_norm_examples() {
        let s = line();
        let a = DiffusionCoefficient::isotropic(1, 0.5).unwrap();
        let times: Vec<f64> = (0..=16).map(|i| i as f64 / 16.0).collect();
        let mk = |f: &dyn Fn(f64) -> f64| {
            SpaceTimeField::new(times.clone(), times.iter().map(|_| s.sample_scalar(|x| f(x[0]))).collect()).unwrap()
        };
        assert_eq!(t_norm(&s, &a, &mk(&|_| 0.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(t_norm(&s, &a, &mk(&|_| 1.0)).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t_norm(&s, &a, &mk(&|x| x)).unwrap(), 1.0, epsilon = 1e-10);
    }
}
