//! Dense implicit finite differences for `∂_t u + a u'' + λ x u' + f(u) = 0`
//! on `[-L, L]`, used as an independent reference for the one-dimensional
//! semilinear problems.

pub struct FdGrid {
    pub half_width: f64,
    pub nx: usize,
    pub nt: usize,
}

impl Default for FdGrid {
    fn default() -> Self {
        FdGrid { half_width: 5.0, nx: 4001, nt: 2048 }
    }
}

pub struct FdSolution {
    pub xs: Vec<f64>,
    /// Profiles at the requested times.
    pub slices: Vec<Vec<f64>>,
}

impl FdSolution {
    /// Linear interpolation of slice `k` at `x`, clamped to the grid.
    pub fn at(&self, k: usize, x: f64) -> f64 {
        let n = self.xs.len();
        let (lo, h) = (self.xs[0], self.xs[1] - self.xs[0]);
        let s = ((x - lo) / h).clamp(0.0, (n - 1) as f64);
        let j = (s.floor() as usize).min(n - 2);
        let th = s - j as f64;
        self.slices[k][j] * (1.0 - th) + self.slices[k][j + 1] * th
    }
}

fn thomas(a: &[f64], b: &[f64], c: &[f64], r: &mut [f64]) {
    let n = b.len();
    let mut cp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    r[0] /= b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        r[i] = (r[i] - a[i] * r[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        r[i] -= cp[i] * r[i + 1];
    }
}

/// Backward Euler in `τ = T - t` with Newton on the reaction term and
/// zero-flux ends. `times` must lie on the `nt` grid.
#[allow(clippy::too_many_arguments)]
pub fn implicit_fd(
    lambda: f64,
    a: f64,
    phi: impl Fn(f64) -> f64,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
    horizon: f64,
    grid: &FdGrid,
    times: &[f64],
) -> FdSolution {
    let nx = grid.nx;
    let h = 2.0 * grid.half_width / (nx - 1) as f64;
    let xs: Vec<f64> = (0..nx).map(|i| -grid.half_width + i as f64 * h).collect();
    let dtau = horizon / grid.nt as f64;
    let mut u: Vec<f64> = xs.iter().map(|&x| phi(x)).collect();
    let step_of = |t: f64| ((horizon - t) / dtau).round() as usize;
    let mut slices = vec![Vec::new(); times.len()];
    let mut record = |s: usize, u: &[f64]| {
        for (i, &t) in times.iter().enumerate() {
            if step_of(t) == s {
                slices[i] = u.to_vec();
            }
        }
    };
    record(0, &u);
    let diff = a / (h * h);
    let (mut lo, mut di, mut up, mut r) = (vec![0.0; nx], vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]);
    for s in 1..=grid.nt {
        let prev = u.clone();
        for _ in 0..4 {
            for i in 0..nx {
                let adv = lambda * xs[i] / (2.0 * h);
                let (im, ip) = (if i == 0 { 1 } else { i - 1 }, if i + 1 == nx { nx - 2 } else { i + 1 });
                let lu = diff * (u[ip] - 2.0 * u[i] + u[im]) + adv * (u[ip] - u[im]);
                r[i] = (u[i] - prev[i]) / dtau - lu - f(u[i]);
                di[i] = 1.0 / dtau + 2.0 * diff - df(u[i]);
                let (cm, cp) = (-(diff - adv), -(diff + adv));
                lo[i] = 0.0;
                up[i] = 0.0;
                if i == 0 {
                    up[i] = cm + cp;
                } else if i + 1 == nx {
                    lo[i] = cm + cp;
                } else {
                    lo[i] = cm;
                    up[i] = cp;
                }
            }
            thomas(&lo, &di, &up, &mut r);
            for (v, d) in u.iter_mut().zip(&r) {
                *v -= d;
            }
        }
        record(s, &u);
    }
    FdSolution { xs, slices }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_terminal_decays_with_the_drift() {
        // φ(x) = x, f ≡ 0: u(t, x) = e^{λ(T-t)} x away from the ends
        let grid = FdGrid { half_width: 5.0, nx: 1001, nt: 400 };
        let sol = implicit_fd(-1.0, 0.5, |x| x, |_| 0.0, |_| 0.0, 1.0, &grid, &[0.0]);
        for x in [-1.0, 0.3, 2.0] {
            assert!((sol.at(0, x) - (-1.0f64).exp() * x).abs() < 2e-3, "{x}");
        }
    }

    #[test]
    fn constant_terminal_follows_the_ode() {
        // y' = -y³ backwards from 0.5: y(τ) = 0.5 / sqrt(1 + 0.5 τ)
        let grid = FdGrid { half_width: 5.0, nx: 201, nt: 2000 };
        let sol = implicit_fd(-1.0, 0.5, |_| 0.5, |y| -y * y * y, |y| -3.0 * y * y, 1.0, &grid, &[0.0]);
        let exact = 0.5 / (1.0f64 + 0.5).sqrt();
        assert!((sol.at(0, 0.0) - exact).abs() < 1e-4);
    }
}
