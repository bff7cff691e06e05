use std::sync::Arc;

use bdsde_core::oracles;
use bdsde_core::singular::{geometric_levels, solve_singular_ladder};
use bdsde_core::solver::{compare_coupled, Tolerance};
use bdsde_core::{
    euler_maruyama, sample_paths, solve_lsmc, BdsdeProblem, DriftStep, DualBrownianPaths, Error, ForwardPaths,
    GeneratorSpec, InitialLaw, LsmcConfig, NoiseCoefficientSpec, RegressionBasis, SdeCoefficients, TerminalCondition,
    TimeGrid,
};

fn bm(n_steps: usize, n_paths: usize, seed: u64) -> (DualBrownianPaths, ForwardPaths) {
    let grid = TimeGrid::uniform(0.0, 1.0, n_steps).unwrap();
    let noise = sample_paths(&grid, 1, 1, n_paths, seed).unwrap();
    let sde = SdeCoefficients::constant(vec![0.0], vec![1.0], 1).unwrap();
    let init = InitialLaw::UniformBox { lo: vec![-1.5], hi: vec![1.5] };
    let fwd = euler_maruyama(&sde, 0.0, &init, &noise).unwrap();
    (noise, fwd)
}

fn bump_terminal(shift: f64) -> TerminalCondition {
    TerminalCondition::bounded(Arc::new(move |x: &[f64]| shift + 1.0 / (1.0 + x[0] * x[0])), 1.0 + shift).unwrap()
}

#[test]
fn implicit_euler_error_halves_with_the_step() {
    let err = |n: usize| {
        let (noise, fwd) = bm(n, 4, 1);
        let problem = BdsdeProblem {
            f: GeneratorSpec::power_law(1.0).unwrap(),
            g: NoiseCoefficientSpec::zero(1),
            terminal: TerminalCondition::constant(2.0).unwrap(),
        };
        let cfg = LsmcConfig::new(RegressionBasis::constant()).with_drift_step(DriftStep::ImplicitEuler);
        let sol = solve_lsmc(&fwd, &problem, &noise, &cfg).unwrap();
        (sol.y(0, 0) - oracles::xi(1.0, 1.0, 2.0)).abs()
    };
    let (e1, e2) = (err(128), err(256));
    assert!(e2 < 0.01);
    assert!((e1 / e2 - 2.0).abs() < 0.2, "{e1} {e2}");
}

#[test]
fn shifted_terminal_shifts_the_solution() {
    let (noise, fwd) = bm(32, 500, 2);
    let cfg = LsmcConfig::new(RegressionBasis::polynomial(2));
    let solve = |shift: f64| {
        let problem = BdsdeProblem {
            f: GeneratorSpec::zero(),
            g: NoiseCoefficientSpec::zero(1),
            terminal: bump_terminal(shift),
        };
        solve_lsmc(&fwd, &problem, &noise, &cfg).unwrap()
    };
    let (a, b) = (solve(0.0), solve(1.0));
    for i in 0..=32 {
        for p in 0..500 {
            assert!((b.y(i, p) - a.y(i, p) - 1.0).abs() < 1e-10);
        }
    }
    let rep = compare_coupled(&a, &b, Tolerance::Residuals(3.0)).unwrap();
    assert_eq!(rep.violations, 0);
    assert!(rep.terminal_ordered);
}

#[test]
fn runs_on_different_noise_cannot_be_compared() {
    let cfg = LsmcConfig::new(RegressionBasis::constant());
    let problem = BdsdeProblem {
        f: GeneratorSpec::zero(),
        g: NoiseCoefficientSpec::zero(1),
        terminal: TerminalCondition::constant(1.0).unwrap(),
    };
    let (n1, f1) = bm(8, 50, 3);
    let (n2, f2) = bm(8, 50, 4);
    let a = solve_lsmc(&f1, &problem, &n1, &cfg).unwrap();
    let b = solve_lsmc(&f2, &problem, &n2, &cfg).unwrap();
    assert!(matches!(compare_coupled(&a, &b, Tolerance::Fixed(0.0)), Err(Error::Coupling(_))));
}

#[test]
fn ladder_stays_below_the_closed_form_bound() {
    let (noise, fwd) = bm(64, 4000, 5);
    let g = NoiseCoefficientSpec::linear(0.0, vec![0.3]).unwrap();
    let h = TerminalCondition::singular(Arc::new(|x: &[f64]| 1.0 / x[0].abs()));
    let cfg = LsmcConfig::new(RegressionBasis::piecewise_constant(16)).with_control_variate(false);
    let levels = geometric_levels(5);
    let ladder = solve_singular_ladder(&fwd, 1.0, &g, &h, &levels, &noise, &cfg, &[]).unwrap();
    for m in &ladder.monotonicity {
        assert_eq!(m.violations_wide, 0, "{m:?}");
    }
    for (n, sol) in levels.iter().zip(&ladder.solutions) {
        for i in 0..=64 {
            let cap = oracles::xi(1.0, 1.0 - noise.grid().node(i), *n);
            let top = sol.y_column(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(top <= cap + 1e-9, "level {n}, node {i}: {top} > {cap}");
        }
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (noise, fwd) = bm(32, 3000, 6);
            let problem = BdsdeProblem {
                f: GeneratorSpec::power_law(1.0).unwrap(),
                g: NoiseCoefficientSpec::linear(0.0, vec![0.3]).unwrap(),
                terminal: bump_terminal(0.0),
            };
            let sol = solve_lsmc(&fwd, &problem, &noise, &LsmcConfig::new(RegressionBasis::polynomial(3))).unwrap();
            (0..=32).flat_map(|i| sol.y_column(i).to_vec()).collect::<Vec<f64>>()
        })
    };
    let (a, b) = (run(1), run(4));
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
