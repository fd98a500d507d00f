//! Shipped experiment presets.

use crate::config::*;

pub const DEFAULT: &str = "ou1d_linear";
pub const NAMES: [&str; 4] = ["ou1d_linear", "ou1d_cubic", "ou2d_lipschitz", "dissipative1d"];

fn ou(dim: usize) -> SemigroupBlock {
    SemigroupBlock {
        kind: SemigroupKind::OuAnalytic,
        lambdas: vec![-1.0; dim],
        noise: vec![1.0; dim],
        drift: None,
        steps_per_unit: 64,
        paths: 4000,
    }
}

fn base(
    name: &str,
    dim: usize,
    quad_order: usize,
    terminal: TerminalSpec,
    driver: DriverSpec,
    x0: Vec<f64>,
) -> ExperimentConfig {
    ExperimentConfig {
        preset: Some(name.to_string()),
        space: SpaceBlock { dim, variances: None, quad_order },
        semigroup: ou(dim),
        problem: ProblemBlock { terminal, driver, horizon: 1.0, steps: 64, solver: SolverKind::Auto },
        paths: PathsBlock { start: StartSpec::Point(x0), paths: 100_000, scheme: SchemeSpec::Auto, export: false },
        bsde: BsdeBlock { degree: 4, picard_iters: 3, p: 2.0 },
        seed: 2024,
        out: None,
        check: None,
    }
}

pub fn by_name(name: &str) -> Option<ExperimentConfig> {
    Some(match name {
        // f(y) = -y, φ(x) = x
        "ou1d_linear" => base(
            name,
            1,
            20,
            TerminalSpec::Coordinate { axis: 0 },
            DriverSpec::Linear { a: -1.0, source: 0.0 },
            vec![1.0],
        ),
        // f(y) = -y³, φ = tanh
        "ou1d_cubic" => base(name, 1, 20, TerminalSpec::Tanh { axis: 0 }, DriverSpec::Cubic { coef: 1.0 }, vec![1.0]),
        // f(y, z) = -y + ½ sin(z₁)
        "ou2d_lipschitz" => {
            let mut c = base(
                name,
                2,
                12,
                TerminalSpec::Tanh { axis: 0 },
                DriverSpec::SinZ { y_coef: -1.0, z_coef: 0.5, axis: 0 },
                vec![0.5, -0.5],
            );
            c.paths.paths = 50_000;
            c
        }
        // drift -x - x³/(1+x²), f(y) = -y, φ = tanh
        "dissipative1d" => {
            let mut c = base(
                name,
                1,
                16,
                TerminalSpec::Tanh { axis: 0 },
                DriverSpec::Linear { a: -1.0, source: 0.0 },
                vec![1.0],
            );
            c.semigroup.kind = SemigroupKind::McEuler;
            c.semigroup.drift = Some("dissipative".into());
            c.semigroup.paths = 20_000;
            c.problem.steps = 32;
            c.paths.paths = 50_000;
            c
        }
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_buildable() {
        for name in NAMES {
            let c = by_name(name).unwrap();
            assert!(c.validate().is_empty(), "{name}: {:?}", c.validate());
            c.build().unwrap();
        }
    }
}
