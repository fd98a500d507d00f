//! Polynomial regression used for conditional expectations on path ensembles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve, symmetric_eigen};
use crate::Real;

/// Rows per block of the design matrix. Blocks are reduced in index order so
/// fitted coefficients never depend on the worker count.
const CHUNK: usize = 4096;

/// Condition number above which the ridge floor is switched on.
pub const COND_LIMIT: f64 = 1e8;
pub const RIDGE_FLOOR: f64 = 1e-10;

/// Tensor Hermite polynomials of total degree `<= degree`, orthonormal under
/// `N(0, diag(variances))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyBasis {
    pub dim: usize,
    pub degree: usize,
    centers: Vec<f64>,
    scales: Vec<f64>,
    exponents: Vec<Vec<usize>>,
}

impl PolyBasis {
    pub fn new<T: Real>(degree: usize, variances: &[T]) -> Result<Self> {
        let dim = variances.len();
        if dim == 0 {
            return Err(Error::config("regression basis needs at least one axis"));
        }
        if variances.iter().any(|v| !(*v > T::zero())) {
            return Err(Error::config("regression basis variances must be positive"));
        }
        let mut exponents = Vec::new();
        for total in 0..=degree {
            push_compositions(dim, total, &mut Vec::new(), &mut exponents);
        }
        Ok(PolyBasis {
            dim,
            degree,
            centers: vec![0.0; dim],
            scales: variances.iter().map(|v| 1.0 / v.as_f64().sqrt()).collect(),
            exponents,
        })
    }

    /// Basis standardized to the empirical mean and variance of `xs`
    /// (`rows × dim`); axes with no spread keep unit scale.
    pub fn fitted<T: Real>(degree: usize, dim: usize, xs: &[T]) -> Result<Self> {
        let rows = xs.len() / dim.max(1);
        if rows == 0 {
            return Err(Error::Shape("no rows to standardize the basis on".into()));
        }
        let mut mean = vec![0.0f64; dim];
        let mut var = vec![0.0f64; dim];
        for r in xs.chunks(dim) {
            for a in 0..dim {
                mean[a] += r[a].as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for r in xs.chunks(dim) {
            for a in 0..dim {
                var[a] += (r[a].as_f64() - mean[a]).powi(2);
            }
        }
        let mut basis = Self::new(degree, &vec![1.0f64; dim])?;
        for a in 0..dim {
            let v = var[a] / rows as f64;
            basis.centers[a] = mean[a];
            basis.scales[a] = if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 };
        }
        Ok(basis)
    }

    /// Default total degree: 4 for `d <= 2`, 3 for `d = 3`.
    pub fn default_degree(dim: usize) -> usize {
        if dim <= 2 {
            4
        } else {
            3
        }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<usize>] {
        &self.exponents
    }

    pub fn eval<T: Real>(&self, x: &[T], out: &mut [f64]) {
        let mut he = vec![vec![0.0f64; self.degree + 1]; self.dim];
        for (a, row) in he.iter_mut().enumerate() {
            let z = (x[a].as_f64() - self.centers[a]) * self.scales[a];
            row[0] = 1.0;
            if self.degree >= 1 {
                row[1] = z;
            }
            for k in 2..=self.degree {
                row[k] = z * row[k - 1] - (k - 1) as f64 * row[k - 2];
            }
            let mut fact = 1.0f64;
            for (k, v) in row.iter_mut().enumerate().skip(1) {
                fact *= k as f64;
                *v /= fact.sqrt();
            }
        }
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().enumerate().map(|(a, &k)| he[a][k]).product();
        }
    }
}

fn push_compositions(dim: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() + 1 == dim {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for k in (0..=total).rev() {
        prefix.push(k);
        push_compositions(dim, total - k, prefix, out);
        prefix.pop();
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RegressionDiagnostics {
    pub rows: usize,
    pub condition: f64,
    pub ridge: f64,
}

/// Least-squares fit of `comps` responses on the basis.
#[derive(Debug, Clone)]
pub struct Fit {
    pub comps: usize,
    /// `[basis][comp]`
    pub coef: Vec<f64>,
    pub diagnostics: RegressionDiagnostics,
}

impl Fit {
    pub fn predict<T: Real>(&self, basis: &PolyBasis, x: &[T], out: &mut [T]) {
        let mut b = vec![0.0f64; basis.len()];
        basis.eval(x, &mut b);
        self.predict_with(&b, out);
    }

    /// Prediction from precomputed basis values.
    pub fn predict_with<T: Real>(&self, b: &[f64], out: &mut [T]) {
        for (c, o) in out.iter_mut().enumerate().take(self.comps) {
            let v: f64 = b.iter().enumerate().map(|(m, bm)| bm * self.coef[m * self.comps + c]).sum();
            *o = T::lit(v);
        }
    }
}

/// Basis values for every row of `xs` (`rows × dim`), laid out `[row][basis]`.
pub fn design<T: Real>(basis: &PolyBasis, xs: &[T]) -> Vec<f64> {
    let d = basis.dim;
    let k = basis.len();
    let rows = xs.len() / d;
    let mut out = vec![0.0f64; rows * k];
    out.par_chunks_mut(k * CHUNK).enumerate().for_each(|(c, block)| {
        for (r, dst) in block.chunks_mut(k).enumerate() {
            let row = c * CHUNK + r;
            basis.eval(&xs[row * d..(row + 1) * d], dst);
        }
    });
    out
}

/// Solve the normal equations for `ys` (`rows × comps`) against a design
/// matrix from [`design`].
pub fn fit_design<T: Real>(k: usize, design: &[f64], ys: &[T], comps: usize) -> Result<Fit> {
    let rows = design.len() / k;
    if ys.len() != rows * comps {
        return Err(Error::Shape(format!("{} responses for {rows} rows × {comps}", ys.len())));
    }
    if rows == 0 {
        return Err(Error::Shape("empty regression".into()));
    }
    let width = k * k + k * comps;
    let partial: Vec<Vec<f64>> = (0..rows.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0f64; width];
            for r in c * CHUNK..((c + 1) * CHUNK).min(rows) {
                let b = &design[r * k..(r + 1) * k];
                for i in 0..k {
                    for j in i..k {
                        acc[i * k + j] += b[i] * b[j];
                    }
                    for q in 0..comps {
                        acc[k * k + i * comps + q] += b[i] * ys[r * comps + q].as_f64();
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0f64; width];
    for p in &partial {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    let inv = 1.0 / rows as f64;
    let mut gram = vec![0.0f64; k * k];
    for i in 0..k {
        for j in i..k {
            let v = total[i * k + j] * inv;
            gram[i * k + j] = v;
            gram[j * k + i] = v;
        }
    }
    let (eig, _) = symmetric_eigen(&gram, k);
    let top = eig.iter().cloned().fold(0.0f64, f64::max);
    let bottom = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if bottom > 0.0 { top / bottom } else { f64::INFINITY };
    let ridge = if condition > COND_LIMIT { RIDGE_FLOOR * top.max(1.0) } else { 0.0 };
    for i in 0..k {
        gram[i * k + i] += ridge;
    }
    let diagnostics = RegressionDiagnostics { rows, condition, ridge };
    if !cholesky_in_place(&mut gram, k) {
        return Err(Error::Numerical(format!(
            "regression Gram matrix singular beyond the ridge floor (rows {rows}, condition {condition:e})"
        )));
    }
    let mut coef = vec![0.0f64; k * comps];
    let mut rhs = vec![0.0f64; k];
    for q in 0..comps {
        for i in 0..k {
            rhs[i] = total[k * k + i * comps + q] * inv;
        }
        cholesky_solve(&gram, k, &mut rhs);
        for i in 0..k {
            coef[i * comps + q] = rhs[i];
        }
    }
    Ok(Fit { comps, coef, diagnostics })
}

pub fn regress<T: Real>(basis: &PolyBasis, xs: &[T], ys: &[T], comps: usize) -> Result<Fit> {
    fit_design(basis.len(), &design(basis, xs), ys, comps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sizes() {
        assert_eq!(PolyBasis::new(4, &[1.0f64]).unwrap().len(), 5);
        assert_eq!(PolyBasis::new(4, &[1.0f64, 1.0]).unwrap().len(), 15);
        assert_eq!(PolyBasis::new(3, &[1.0f64; 3]).unwrap().len(), 20);
        assert!(PolyBasis::new(2, &[0.0f64]).is_err());
    }

    #[test]
    fn orthonormal_under_reference_measure() {
        let var = 0.5f64;
        let basis = PolyBasis::new(4, &[var]).unwrap();
        let rule = crate::quadrature::gauss_hermite::<f64>(20);
        let mut g = [0.0; 25];
        let mut b = vec![0.0; 5];
        for (z, w) in rule.nodes.iter().zip(&rule.weights) {
            basis.eval(&[z * var.sqrt()], &mut b);
            for i in 0..5 {
                for j in 0..5 {
                    g[i * 5 + j] += w * b[i] * b[j];
                }
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                assert_abs_diff_eq!(g[i * 5 + j], if i == j { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reproduces_basis_members() {
        let basis = PolyBasis::new(3, &[1.0f64, 2.0]).unwrap();
        let xs: Vec<f64> = (0..200).flat_map(|i| [(i % 20) as f64 / 5.0 - 2.0, (i / 20) as f64 / 3.0 - 1.5]).collect();
        let ys: Vec<f64> = xs.chunks(2).map(|x| 1.0 + x[0] * x[1] - 0.5 * x[1].powi(3)).collect();
        let fit = regress(&basis, &xs, &ys, 1).unwrap();
        let mut out = [0.0f64];
        for (x, y) in xs.chunks(2).zip(&ys) {
            fit.predict(&basis, x, &mut out);
            assert!((out[0] - y).abs() < 1e-10);
        }
        assert_eq!(fit.diagnostics.ridge, 0.0);
    }

    #[test]
    fn collinear_design_uses_ridge_or_fails_cleanly() {
        let basis = PolyBasis::new(2, &[1.0f64]).unwrap();
        let xs = vec![1.0f64; 50];
        let ys = vec![3.0f64; 50];
        match regress(&basis, &xs, &ys, 1) {
            Ok(fit) => {
                assert!(fit.diagnostics.ridge > 0.0);
                let mut out = [0.0f64];
                fit.predict(&basis, &[1.0], &mut out);
                assert!((out[0] - 3.0).abs() < 1e-6);
            }
            Err(e) => assert!(matches!(e, Error::Numerical(_))),
        }
    }
}
