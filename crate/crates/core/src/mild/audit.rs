//! Energy, pointwise and comparison relations satisfied by a mild solution.

use serde::{Deserialize, Serialize};

use super::{convolve, SemilinearProblem};
use crate::error::Result;
use crate::space::{energy_with, trapezoid, Field, SpaceTimeField};
use crate::Real;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RelationAudit {
    pub times: Vec<f64>,
    /// `rhs - lhs` of the energy inequality per time node.
    pub energy_slack: Vec<f64>,
    /// L²(μ) norm of the pointwise energy-identity residual per time node.
    pub pointwise_l2: Vec<f64>,
    pub pointwise_sup: Vec<f64>,
    /// `-‖(P|φ| + ∫P⟨û, f⟩ - |u_t|)⁻‖` in L²(μ); zero when the bound holds at every node.
    pub modulus_slack: Vec<f64>,
    /// Same measure for the mixed convolution inequality.
    pub convolution_slack: Vec<f64>,
    /// `2∫(f, u⁺) + ‖φ⁺‖² - ‖u_t⁺‖²`.
    pub positive_part_slack: Vec<f64>,
    /// `min u` when `φ >= 0` and `f >= 0`; `None` otherwise.
    pub positivity_min: Option<f64>,
    pub weak_form_const: f64,
    pub weak_form_self: f64,
}

impl RelationAudit {
    pub fn worst_energy_slack(&self) -> f64 {
        self.energy_slack.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_energy_slack(&self) -> f64 {
        self.energy_slack.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn worst_pointwise(&self) -> f64 {
        self.pointwise_l2.iter().copied().fold(0.0, f64::max)
    }

    pub fn worst_modulus_slack(&self) -> f64 {
        self.modulus_slack.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn worst_convolution_slack(&self) -> f64 {
        self.convolution_slack.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn worst_positive_part_slack(&self) -> f64 {
        self.positive_part_slack.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn dot_field<T: Real>(a: &Field<T>, b: &Field<T>) -> Field<T> {
    let l = a.comps;
    Field {
        comps: 1,
        values: a.values.chunks(l).zip(b.values.chunks(l)).map(|(x, y)| crate::scalar::dot(x, y)).collect(),
    }
}

fn component<T: Real>(a: &Field<T>, c: usize) -> Field<T> {
    Field { comps: 1, values: a.values.iter().skip(c).step_by(a.comps).copied().collect() }
}

/// `-‖s⁻‖_{L²(μ)}` of a nodal slack.
fn negative_part<T: Real>(space: &crate::space::TruncatedSpace<T>, slack: impl Iterator<Item = T>) -> f64 {
    let w = space.weights();
    let sq: f64 = slack.zip(w).map(|(s, &w)| w.as_f64() * s.min(T::zero()).as_f64().powi(2)).sum();
    if sq > 0.0 {
        -sq.sqrt()
    } else {
        0.0
    }
}

fn l2<T: Real>(p: &SemilinearProblem<T>, f: &Field<T>) -> f64 {
    p.space.norm_sq(f).as_f64().sqrt()
}

/// Audit every relation at every time node. Violations are reported, not raised.
pub fn relation_audit<T: Real>(problem: &SemilinearProblem<T>, u: &SpaceTimeField<T>) -> Result<RelationAudit> {
    let space = &problem.space;
    let disc = problem.discretization()?;
    let n = problem.steps;
    let l = problem.comps();
    let dt = disc.dt;
    let alpha = problem.semigroup.drift_field().sector_alpha;
    let drift = problem.semigroup.drift_field();
    let phi = &problem.terminal;

    let f: Vec<Field<T>> =
        (0..=n).map(|i| problem.driver_field(&disc, disc.times[i], &u.slices[i])).collect::<Result<_>>()?;
    let grads: Vec<_> = u.slices.iter().map(|s| space.gradient(s)).collect::<Result<_>>()?;
    let energy: Vec<T> = grads.iter().map(|g| energy_with(space, &disc.nodal, g, g)).collect();
    let norms: Vec<T> = u.slices.iter().map(|s| space.norm_sq(s)).collect();
    let fu: Vec<T> = f.iter().zip(&u.slices).map(|(a, b)| space.inner(a, b)).collect();

    // energy inequality
    let phi_sq = space.norm_sq(phi);
    let energy_slack: Vec<f64> = (0..=n)
        .map(|i| {
            let lhs = norms[i] + T::lit(2.0) * trapezoid(&energy[i..], dt);
            let rhs = T::lit(2.0) * trapezoid(&fu[i..], dt) + phi_sq + T::lit(2.0) * alpha * trapezoid(&norms[i..], dt);
            (rhs - lhs).as_f64()
        })
        .collect();

    // pointwise identity |u|² + 2∫P|Du|² = P|φ|² + 2∫P⟨u,f⟩
    let d = space.dim();
    let du_sq: Vec<Field<T>> = grads
        .iter()
        .map(|g| {
            let mut z = vec![T::zero(); l * d];
            Field {
                comps: 1,
                values: (0..space.n_nodes())
                    .map(|i| {
                        disc.nodal.scaled_gradient(i, g.at(i), &mut z);
                        crate::scalar::dot(&z, &z)
                    })
                    .collect(),
            }
        })
        .collect();
    let uf: Vec<Field<T>> = u.slices.iter().zip(&f).map(|(a, b)| dot_field(a, b)).collect();
    let c_du = convolve(space, &disc, &du_sq);
    let c_uf = convolve(space, &disc, &uf);
    let p_phi2 = problem.propagate_terminal(&disc, 1, |v, o| o[0] = crate::scalar::dot(v, v))?;
    let two = T::lit(2.0);
    let mut pointwise_l2 = Vec::with_capacity(n + 1);
    let mut pointwise_sup = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let u2 = dot_field(&u.slices[i], &u.slices[i]);
        let r = Field {
            comps: 1,
            values: (0..space.n_nodes())
                .map(|k| u2.values[k] + two * c_du[i].values[k] - p_phi2[i].values[k] - two * c_uf[i].values[k])
                .collect(),
        };
        pointwise_l2.push(l2(problem, &r));
        pointwise_sup.push(r.sup_norm().as_f64());
    }

    // |u_t| <= P|φ| + ∫P⟨û, f⟩
    let uhat_f: Vec<Field<T>> = u
        .slices
        .iter()
        .zip(&f)
        .map(|(s, g)| Field {
            comps: 1,
            values: s
                .values
                .chunks(l)
                .zip(g.values.chunks(l))
                .map(|(a, b)| {
                    let m = crate::scalar::norm2(a);
                    if m > T::zero() {
                        crate::scalar::dot(a, b) / m
                    } else {
                        T::zero()
                    }
                })
                .collect(),
        })
        .collect();
    let c_hat = convolve(space, &disc, &uhat_f);
    let p_abs = problem.propagate_terminal(&disc, 1, |v, o| o[0] = crate::scalar::norm2(v))?;
    let modulus_slack: Vec<f64> = (0..=n)
        .map(|i| {
            let m = u.slices[i].pointwise_norm();
            negative_part(space, (0..space.n_nodes()).map(|k| p_abs[i].values[k] + c_hat[i].values[k] - m.values[k]))
        })
        .collect();

    // ∫P(f_s P_{T-s}φ) <= ½P_{T-t}φ² + ∫∫P(f_s P_{r-s} f_r), per component
    let mut convolution_slack = vec![0.0f64; n + 1];
    for c in 0..l {
        let fc: Vec<Field<T>> = f.iter().map(|g| component(g, c)).collect();
        let p_phi = problem.propagate_terminal(&disc, 1, |v, o| o[0] = v[c])?;
        let inner = convolve(space, &disc, &fc);
        let lhs_in: Vec<Field<T>> = fc.iter().zip(&p_phi).map(|(a, b)| a.zip_map(b, |x, y| x * y)).collect();
        let rhs_in: Vec<Field<T>> = fc.iter().zip(&inner).map(|(a, b)| a.zip_map(b, |x, y| x * y)).collect();
        let lhs = convolve(space, &disc, &lhs_in);
        let rhs = convolve(space, &disc, &rhs_in);
        let half_p = problem.propagate_terminal(&disc, 1, |v, o| o[0] = v[c] * v[c] * T::lit(0.5))?;
        for i in 0..=n {
            let s = negative_part(
                space,
                (0..space.n_nodes()).map(|k| half_p[i].values[k] + rhs[i].values[k] - lhs[i].values[k]),
            );
            convolution_slack[i] = convolution_slack[i].min(s);
        }
    }

    // ‖u_t⁺‖² <= 2∫(f, u⁺) + ‖φ⁺‖²
    let plus: Vec<Field<T>> = u.slices.iter().map(|s| s.map(|v| v.max(T::zero()))).collect();
    let f_plus: Vec<T> = f.iter().zip(&plus).map(|(a, b)| space.inner(a, b)).collect();
    let phi_plus = space.norm_sq(&phi.map(|v| v.max(T::zero())));
    let positive_part_slack: Vec<f64> =
        (0..=n).map(|i| (two * trapezoid(&f_plus[i..], dt) + phi_plus - space.norm_sq(&plus[i])).as_f64()).collect();

    let data_nonneg =
        phi.values.iter().all(|&v| v >= T::zero()) && f.iter().all(|g| g.values.iter().all(|&v| v >= T::zero()));
    let positivity_min = if data_nonneg {
        Some(u.slices.iter().map(|s| s.min_value().as_f64()).fold(f64::INFINITY, f64::min))
    } else {
        None
    };

    // weak form with test functions ϕ ≡ 1 and ϕ = u
    let ones = Field { comps: l, values: vec![T::one(); space.n_nodes() * l] };
    let drift_dot = |i: usize, test: &Field<T>| -> T {
        if drift.is_zero() {
            return T::zero();
        }
        let mut b = vec![T::zero(); d];
        let mut ab = vec![T::zero(); d];
        let mut acc = T::zero();
        for k in 0..space.n_nodes() {
            drift.at(space.node(k), &mut b);
            let a = disc.nodal.matrix(k);
            crate::space::apply_rows(a, d, &b, &mut ab);
            let g = grads[i].at(k);
            let v = test.at(k);
            let mut loc = T::zero();
            for c in 0..l {
                loc += crate::scalar::dot(&ab, &g[c * d..(c + 1) * d]) * v[c];
            }
            acc += space.weights()[k] * loc;
        }
        acc
    };
    let const_terms: Vec<T> = (0..=n).map(|i| drift_dot(i, &ones) - space.inner(&f[i], &ones)).collect();
    let weak_form_const =
        (trapezoid(&const_terms, dt) - space.inner(phi, &ones) + space.inner(&u.slices[0], &ones)).as_f64();
    let self_terms: Vec<T> = (0..=n)
        .map(|i| {
            let dudt = if i == 0 {
                u.slices[1].zip_map(&u.slices[0], |a, b| (a - b) / dt)
            } else if i == n {
                u.slices[n].zip_map(&u.slices[n - 1], |a, b| (a - b) / dt)
            } else {
                u.slices[i + 1].zip_map(&u.slices[i - 1], |a, b| (a - b) / (two * dt))
            };
            space.inner(&u.slices[i], &dudt) + energy[i] + drift_dot(i, &u.slices[i]) - fu[i]
        })
        .collect();
    let weak_form_self =
        if n >= 2 { (trapezoid(&self_terms, dt) - space.inner(phi, &u.slices[n]) + norms[0]).as_f64() } else { 0.0 };

    Ok(RelationAudit {
        times: disc.times.iter().map(|t| t.as_f64()).collect(),
        energy_slack,
        pointwise_l2,
        pointwise_sup,
        modulus_slack,
        convolution_slack,
        positive_part_slack,
        positivity_min,
        weak_form_const,
        weak_form_self,
    })
}

/// A priori bounds for a computed solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AprioriReport {
    pub t_norm_sq: f64,
    /// `‖φ‖₂² + ∫‖f⁰‖₂² dt`.
    pub data_l2: f64,
    /// `e^{T(1+2C+C²+2α)} · data` with `C` the joint Lipschitz constant.
    pub lipschitz_bound: f64,
    pub lipschitz_slack: f64,
    /// `2 e^{(1+C²+2α)T} · data` with `C` the z-Lipschitz constant.
    pub monotone_bound: f64,
    pub monotone_slack: f64,
    /// `‖u‖_∞ / (‖φ‖_∞ + ‖f⁰‖_∞)`.
    pub linf_ratio: f64,
}

pub fn apriori_report<T: Real>(problem: &SemilinearProblem<T>, u: &SpaceTimeField<T>) -> Result<AprioriReport> {
    let disc = problem.discretization()?;
    let space = &problem.space;
    let mut f0_sq = Vec::with_capacity(disc.times.len());
    let mut f0_sup = 0.0f64;
    for &t in &disc.times {
        let mut out = vec![T::zero(); problem.comps()];
        let f0 = Field {
            comps: problem.comps(),
            values: (0..space.n_nodes())
                .flat_map(|k| {
                    problem.driver.f0(t, space.node(k), &mut out);
                    out.clone()
                })
                .collect(),
        };
        f0_sup = f0_sup.max(f0.pointwise_norm().sup_norm().as_f64());
        f0_sq.push(space.norm_sq(&f0));
    }
    let data = (space.norm_sq(&problem.terminal) + trapezoid(&f0_sq, disc.dt)).as_f64();
    let tn = problem.t_norm(u)?.as_f64();
    let meta = problem.driver.meta();
    let c_joint = meta.lipschitz_y.max(meta.lipschitz_z).as_f64();
    let c_z = meta.lipschitz_z.as_f64();
    let alpha = problem.semigroup.drift_field().sector_alpha.as_f64();
    let horizon = problem.horizon.as_f64();
    let lipschitz_bound = (horizon * (1.0 + 2.0 * c_joint + c_joint * c_joint + 2.0 * alpha)).exp() * data;
    let monotone_bound = 2.0 * ((1.0 + c_z * c_z + 2.0 * alpha) * horizon).exp() * data;
    let denom = problem.terminal.pointwise_norm().sup_norm().as_f64() + f0_sup;
    let u_sup = u.slices.iter().map(|s| s.pointwise_norm().sup_norm().as_f64()).fold(0.0, f64::max);
    Ok(AprioriReport {
        t_norm_sq: tn * tn,
        data_l2: data,
        lipschitz_bound,
        lipschitz_slack: lipschitz_bound - tn * tn,
        monotone_bound,
        monotone_slack: monotone_bound - tn * tn,
        linf_ratio: if denom > 0.0 { u_sup / denom } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{DriverRef, FnDriver};
    use crate::mild::solve_linear;
    use crate::semigroup::SemigroupSpec;
    use crate::space::TruncatedSpace;

    fn problem(
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

    #[test]
    fn zero_data_gives_zero_residuals() {
        let p = problem(zero(), |_| 0.0, 8);
        let u = solve_linear(&p).unwrap();
        let a = relation_audit(&p, &u).unwrap();
        assert!(a.energy_slack.iter().all(|&v| v == 0.0));
        assert!(a.pointwise_l2.iter().all(|&v| v == 0.0));
        assert_eq!(a.weak_form_const, 0.0);
        assert_eq!(a.weak_form_self, 0.0);
    }

    #[test]
    fn relations_on_linear_solution() {
        let p = problem(zero(), |x| x, 64);
        let u = solve_linear(&p).unwrap();
        let a = relation_audit(&p, &u).unwrap();
        let dt = 1.0 / 64.0;
        assert!(a.worst_energy_slack() >= -5.0 * dt);
        assert!(a.worst_pointwise() <= 5.0 * dt);
        assert!(a.worst_modulus_slack() >= -1e-8);
        assert!(a.worst_positive_part_slack() >= -5.0 * dt);
        assert!(a.weak_form_const.abs() < 1e-10);
        assert!(a.weak_form_self.abs() < 5.0 * dt);
    }

    #[test]
    fn maximum_principle_applies() {
        let one = FnDriver::source(1, 1, 1.0, |_, _, o| o[0] = 1.0).into_ref();
        let p = problem(one, |x| (-x * x).exp(), 32);
        let u = solve_linear(&p).unwrap();
        let a = relation_audit(&p, &u).unwrap();
        assert!(a.positivity_min.unwrap() >= -1e-10);
        assert!(a.worst_convolution_slack() >= -1e-6, "{:?}", a.convolution_slack);
    }

    #[test]
    fn perturbation_inflates_pointwise_residual() {
        let p = problem(zero(), |x| x, 32);
        let u = solve_linear(&p).unwrap();
        let base = relation_audit(&p, &u).unwrap().worst_pointwise();
        let mut bad = u.clone();
        let k = 10;
        bad.slices[k] = bad.slices[k].zip_map(&p.space.sample_scalar(|x| x[0]), |a, b| a + 0.1 * b);
        let worse = relation_audit(&p, &bad).unwrap().worst_pointwise();
        assert!(worse > 10.0 * base, "{worse} vs {base}");
    }
}
