use kolmo::bsde::{lsmc_solve, BsdeProblem, LsmcSettings};
use kolmo::driver::{q_n, theta_r, FnDriver, Preset, PresetDriver};
use kolmo::mild::{picard_lipschitz, solve_linear, PicardSettings, SemilinearProblem};
use kolmo::paths::{sample, PathConfig, Scheme, Start};
use kolmo::quadrature::gauss_hermite;
use kolmo::semigroup::SemigroupSpec;
use kolmo::space::TruncatedSpace;
use kolmo::{DriverRef, Problem, Space};
use proptest::prelude::*;

fn ou1() -> (SemigroupSpec<f64>, Space) {
    let sg = SemigroupSpec::ou(vec![-1.0], vec![1.0]).unwrap();
    let space = TruncatedSpace::build(1, &sg.invariant_variances(), 16).unwrap();
    (sg, space)
}

fn zero_driver() -> DriverRef {
    FnDriver::source(1, 1, 0.0, |_, _, o| o[0] = 0.0).into_ref()
}

fn minus_y() -> DriverRef {
    PresetDriver::new(Preset::Linear { a: -1.0, source: None }, 1, 1).unwrap().into_ref()
}

fn problem(phi: impl Fn(f64) -> f64 + Send + Sync + 'static, driver: DriverRef) -> Problem {
    let (sg, space) = ou1();
    SemilinearProblem::from_fn(space, sg, 1, move |x, o| o[0] = phi(x[0]), driver, 1.0, 16).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gauss_hermite_integrates_monomials(n in 2usize..24, k in 0usize..6) {
        // E[G^{2k}] = (2k-1)!! for a standard normal, exact when 2k < 2n
        prop_assume!(2 * k < 2 * n);
        let rule = gauss_hermite::<f64>(n);
        let m: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(2 * k as i32)).sum();
        let exact: f64 = (1..=k).map(|j| (2 * j - 1) as f64).product();
        prop_assert!((m - exact).abs() <= 1e-9 * exact.max(1.0));
    }

    #[test]
    fn semigroup_is_linear_and_conservative(a in -3.0f64..3.0, b in -3.0f64..3.0, t in 0.01f64..2.0, c in -5.0f64..5.0) {
        let (sg, space) = ou1();
        let f = space.sample_scalar(|x| x[0].sin());
        let g = space.sample_scalar(|x| (x[0] * 0.5).cos());
        let comb = f.zip_map(&g, |u, v| a * u + b * v);
        let lhs = sg.apply(&space, t, &comb).unwrap();
        let (pf, pg) = (sg.apply(&space, t, &f).unwrap(), sg.apply(&space, t, &g).unwrap());
        for i in 0..space.n_nodes() {
            let rhs = a * pf.values[i] + b * pg.values[i];
            prop_assert!((lhs.values[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
        let one = sg.apply(&space, t, &space.sample_scalar(|_| c)).unwrap();
        prop_assert!(one.values.iter().all(|v| (v - c).abs() <= 1e-12 * (1.0 + c.abs())));
    }

    #[test]
    fn linear_solution_is_linear_in_the_terminal(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let u = solve_linear(&problem(|x| x.tanh(), zero_driver())).unwrap();
        let v = solve_linear(&problem(|x| (x * x).min(4.0), zero_driver())).unwrap();
        let w = solve_linear(&problem(move |x| a * x.tanh() + b * (x * x).min(4.0), zero_driver())).unwrap();
        for k in 0..u.slices.len() {
            for i in 0..u.slices[k].values.len() {
                let rhs = a * u.slices[k].values[i] + b * v.slices[k].values[i];
                prop_assert!((w.slices[k].values[i] - rhs).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn terminal_shift_propagates_with_the_discount(c in -1.0f64..1.0) {
        // f = -y: shifting φ by c shifts u by c w, w ≈ e^{-(T-t)} the solution from φ ≡ 1
        let (u, _) = picard_lipschitz(&problem(|x| x.tanh(), minus_y()), &PicardSettings::default()).unwrap();
        let (v, _) = picard_lipschitz(&problem(move |x| x.tanh() + c, minus_y()), &PicardSettings::default()).unwrap();
        let (w, _) = picard_lipschitz(&problem(|_| 1.0, minus_y()), &PicardSettings::default()).unwrap();
        for (k, t) in u.times.iter().enumerate() {
            let decay = (-(1.0 - t)).exp();
            for ((a, b), s) in u.slices[k].values.iter().zip(&v.slices[k].values).zip(&w.slices[k].values) {
                prop_assert!((b - a - c * s).abs() <= 1e-8, "t={t}");
                prop_assert!((s - decay).abs() <= 2e-3, "t={t} w={s}");
            }
        }
    }

    #[test]
    fn comparison_principle(c in 0.0f64..1.0) {
        let (u, _) = picard_lipschitz(&problem(|x| x.tanh(), minus_y()), &PicardSettings::default()).unwrap();
        let (v, _) = picard_lipschitz(&problem(move |x| x.tanh() + c * x.cos().abs(), minus_y()), &PicardSettings::default()).unwrap();
        for (s, r) in u.slices.iter().zip(&v.slices) {
            prop_assert!(s.values.iter().zip(&r.values).all(|(a, b)| *b >= *a - 1e-8));
        }
    }

    #[test]
    fn cutoffs_stay_in_range(y in proptest::collection::vec(-10.0f64..10.0, 1..4), r in 0.0f64..5.0, n in 0.1f64..5.0) {
        let th = theta_r(&y, r);
        prop_assert!((0.0..=1.0).contains(&th));
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= r {
            prop_assert_eq!(th, 1.0);
        }
        if norm >= r + 1.0 {
            prop_assert_eq!(th, 0.0);
        }
        let mut q = vec![0.0; y.len()];
        q_n(&y, n, &mut q);
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(qn <= n * (1.0 + 1e-12));
        if norm <= n {
            prop_assert_eq!(q, y);
        }
    }

    #[test]
    fn constant_terminal_bsde_is_exact(c in -3.0f64..3.0, seed in 0u64..1000) {
        let (sg, _) = ou1();
        let cfg = PathConfig { start: Start::Point(vec![0.3]), horizon: 1.0, steps: 8, paths: 500, seed, scheme: Scheme::Auto };
        let ens = sample(&sg, &cfg).unwrap();
        let prob = BsdeProblem::from_terminal_fn(&ens, move |_, o| o[0] = c, zero_driver(), sg.diffusion().unwrap(), 0.0).unwrap();
        let sol = lsmc_solve(&prob, &LsmcSettings::default()).unwrap();
        prop_assert!((sol.y0[0].value - c).abs() <= 1e-10);
        prop_assert!(sol.y0[0].se <= 1e-10);
        for k in 0..=ens.steps {
            for p in 0..ens.paths {
                prop_assert!((sol.y(p, k)[0] - c).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn sampling_is_deterministic_across_pools() {
    let (sg, _) = ou1();
    let cfg =
        PathConfig { start: Start::Invariant, horizon: 1.0, steps: 16, paths: 3000, seed: 7, scheme: Scheme::Euler };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| sample(&sg, &cfg).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.states(), b.states());
    assert_eq!(a.increments(), b.increments());
    let other = sample(&sg, &PathConfig { seed: 8, ..cfg.clone() }).unwrap();
    assert_ne!(a.states(), other.states());
}

#[test]
fn subsets_are_slices_of_the_ensemble() {
    let (sg, _) = ou1();
    let cfg = PathConfig {
        start: Start::Point(vec![1.0]),
        horizon: 0.5,
        steps: 4,
        paths: 50,
        seed: 3,
        scheme: Scheme::Exact,
    };
    let ens = sample(&sg, &cfg).unwrap();
    let sub = ens.subset(10, 15);
    assert_eq!(sub.paths, 15);
    for p in 0..15 {
        for k in 0..=4 {
            assert_eq!(sub.state(p, k), ens.state(p + 10, k));
        }
        for k in 0..4 {
            assert_eq!(sub.increment(p, k), ens.increment(p + 10, k));
        }
    }
}

#[test]
fn tower_property_on_the_ou_coordinate() {
    // zero driver, ξ = X_T: Y_k = e^{-(T-t_k)} X_k
    let (sg, _) = ou1();
    let cfg =
        PathConfig { start: Start::Invariant, horizon: 1.0, steps: 8, paths: 20_000, seed: 11, scheme: Scheme::Exact };
    let ens = sample(&sg, &cfg).unwrap();
    let prob =
        BsdeProblem::from_terminal_fn(&ens, |x, o| o[0] = x[0], zero_driver(), sg.diffusion().unwrap(), 0.0).unwrap();
    let sol = lsmc_solve(&prob, &LsmcSettings::default()).unwrap();
    for k in [2, 4, 6] {
        let decay = (-(1.0 - ens.time(k))).exp();
        let err: f64 = (0..ens.paths).map(|p| (sol.y(p, k)[0] - decay * ens.state(p, k)[0]).powi(2)).sum::<f64>()
            / ens.paths as f64;
        assert!(err.sqrt() < 0.02, "k={k} rms={}", err.sqrt());
    }
}

#[test]
fn f32_instantiation_agrees_with_f64() {
    let sg = SemigroupSpec::<f32>::ou(vec![-1.0], vec![1.0]).unwrap();
    let space = TruncatedSpace::build(1, &sg.invariant_variances(), 12).unwrap();
    let zero = FnDriver::source(1, 1, 0.0f32, |_, _, o| o[0] = 0.0).into_ref();
    let p = kolmo::Problem32::from_fn(space, sg, 1, |x: &[f32], o: &mut [f32]| o[0] = x[0], zero, 1.0, 8).unwrap();
    let u = solve_linear(&p).unwrap();
    let k = (-1.0f32).exp();
    for (i, v) in u.slices[0].values.iter().enumerate() {
        let x = p.space.node(i)[0];
        assert!((v - k * x).abs() < 1e-4);
    }
}
