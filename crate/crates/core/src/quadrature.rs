//! One-dimensional Gaussian rules and barycentric Lagrange machinery.

use crate::Real;

/// Nodes and weights of a one-dimensional rule.
#[derive(Debug, Clone)]
pub struct Rule<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

/// Gauss–Hermite rule for the standard normal law: `sum w_i f(x_i) ≈ E f(Z)`.
///
/// Nodes are found by Newton iteration on the orthonormal Hermite recurrence,
/// then rescaled from the `exp(-x^2)` weight. Weights are renormalised to sum
/// to one.
pub fn gauss_hermite<T: Real>(n: usize) -> Rule<T> {
    assert!(n >= 1, "gauss_hermite needs at least one node");
    // Newton in f64 regardless of T; the rule is then rounded once.
    let mut x = vec![0.0f64; n];
    let mut w = vec![0.0f64; n];
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let total: f64 = w.iter().sum();
    let sqrt2 = std::f64::consts::SQRT_2;
    // ascending order
    let nodes = x.iter().rev().map(|&v| T::lit(v * sqrt2)).collect();
    let weights = w.iter().rev().map(|&v| T::lit(v / total)).collect();
    Rule { nodes, weights }
}

/// Gauss–Legendre rule on `[-1, 1]`, weights summing to 2.
pub fn gauss_legendre<T: Real>(n: usize) -> Rule<T> {
    assert!(n >= 1, "gauss_legendre needs at least one node");
    let mut x = vec![0.0f64; n];
    let mut w = vec![0.0f64; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 1.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    Rule { nodes: x.into_iter().map(T::lit).collect(), weights: w.into_iter().map(T::lit).collect() }
}

/// Barycentric weights `1 / prod_{k != j} (x_j - x_k)`, scaled so the largest
/// has unit magnitude (the scale cancels in every formula below).
pub fn barycentric_weights<T: Real>(nodes: &[T]) -> Vec<T> {
    let n = nodes.len();
    let xs: Vec<f64> = nodes.iter().map(|v| v.as_f64()).collect();
    // log-magnitudes keep long rules clear of overflow
    let mut logs = vec![0.0f64; n];
    let mut signs = vec![1.0f64; n];
    for j in 0..n {
        for k in 0..n {
            if k != j {
                let d = xs[j] - xs[k];
                logs[j] -= d.abs().ln();
                if d < 0.0 {
                    signs[j] = -signs[j];
                }
            }
        }
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logs.iter().zip(&signs).map(|(l, s)| T::lit(s * (l - top).exp())).collect()
}

/// Values of every Lagrange cardinal function at `x`, written into `out`.
pub fn lagrange_row<T: Real>(nodes: &[T], bary: &[T], x: T, out: &mut [T]) {
    debug_assert_eq!(out.len(), nodes.len());
    for (j, &xj) in nodes.iter().enumerate() {
        if x == xj {
            out.iter_mut().for_each(|o| *o = T::zero());
            out[j] = T::one();
            return;
        }
    }
    let mut denom = T::zero();
    for ((o, &xj), &wj) in out.iter_mut().zip(nodes).zip(bary) {
        let t = wj / (x - xj);
        *o = t;
        denom += t;
    }
    out.iter_mut().for_each(|o| *o /= denom);
}

/// Row-major `n x n` differentiation matrix of the interpolant through `nodes`.
pub fn differentiation_matrix<T: Real>(nodes: &[T], bary: &[T]) -> Vec<T> {
    let n = nodes.len();
    let mut d = vec![T::zero(); n * n];
    for i in 0..n {
        let mut diag = T::zero();
        for j in 0..n {
            if i != j {
                let v = (bary[j] / bary[i]) / (nodes[i] - nodes[j]);
                d[i * n + j] = v;
                diag -= v;
            }
        }
        d[i * n + i] = diag;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial(k: usize) -> f64 {
        (1..=k).rev().step_by(2).map(|v| v as f64).product()
    }

    #[test]
    fn hermite_moments_exact_to_degree_2n_minus_1() {
        for n in [2usize, 5, 10, 20, 31] {
            let r: Rule<f64> = gauss_hermite(n);
            for k in 0..(2 * n) {
                let m: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(k as i32)).sum();
                let exact = if k % 2 == 1 { 0.0 } else { double_factorial(k.saturating_sub(1)) };
                if exact == 0.0 {
                    let scale = double_factorial(k).max(1.0);
                    assert!(m.abs() <= 1e-10 * scale, "n={n} k={k} m={m}");
                } else {
                    assert!(((m - exact) / exact).abs() <= 1e-10, "n={n} k={k} m={m} exact={exact}");
                }
            }
        }
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let r: Rule<f64> = gauss_legendre(16);
        for k in 0..32 {
            let m: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(k)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((m - exact).abs() < 1e-13, "k={k}");
        }
    }

    #[test]
    fn differentiation_is_exact_on_low_degree() {
        let r: Rule<f64> = gauss_hermite(12);
        let b = barycentric_weights(&r.nodes);
        let d = differentiation_matrix(&r.nodes, &b);
        let n = r.nodes.len();
        let f: Vec<f64> = r.nodes.iter().map(|x| x.powi(5) - 2.0 * x * x).collect();
        for i in 0..n {
            let df: f64 = (0..n).map(|j| d[i * n + j] * f[j]).sum();
            let x = r.nodes[i];
            let exact = 5.0 * x.powi(4) - 4.0 * x;
            assert!((df - exact).abs() < 1e-8 * (1.0 + exact.abs()));
        }
    }

    #[test]
    fn lagrange_row_reproduces_cubic() {
        let r: Rule<f64> = gauss_hermite(8);
        let b = barycentric_weights(&r.nodes);
        let mut row = vec![0.0; 8];
        for &x in &[-3.7, -0.2, 0.0, 1.3, 4.4] {
            lagrange_row(&r.nodes, &b, x, &mut row);
            let v: f64 = row.iter().zip(&r.nodes).map(|(l, xn)| l * xn.powi(3)).sum();
            assert!((v - x * x * x).abs() < 1e-9 * (1.0 + (x * x * x).abs()));
        }
    }

    #[test]
    fn single_precision_rule_is_usable() {
        let r: Rule<f32> = gauss_hermite(6);
        let m2: f32 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x * x).sum();
        assert!((m2 - 1.0).abs() < 1e-5);
    }
}
