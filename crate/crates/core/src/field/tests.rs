use std::sync::Arc;

use super::*;
use crate::drivers::{GeneratorSpec, NoiseCoefficientSpec};
use crate::regression::RegressionBasis;
use crate::test_fn::{Bump, Constant, Sum, TimeFactor};

fn heat() -> SdeCoefficients {
    SdeCoefficients::constant(vec![0.0], vec![1.0], 1).unwrap()
}

fn problem(f: GeneratorSpec, g: NoiseCoefficientSpec, terminal: TerminalCondition) -> BdsdeProblem {
    BdsdeProblem { f, g, terminal }
}

fn synthetic_heat(n_steps: usize, n_x: usize) -> RandomField {
    // u = x² + (T - s), σ*∇u = 2x.
    let grid = TimeGrid::uniform(0.0, 1.0, n_steps).unwrap();
    let space = SpatialGrid::new(vec![-1.5], vec![1.5], vec![n_x]).unwrap();
    let pts = space.points();
    let mut u = Vec::new();
    let mut g = Vec::new();
    for &s in grid.nodes() {
        for x in &pts {
            u.push(x[0] * x[0] + 1.0 - s);
            g.push(2.0 * x[0]);
        }
    }
    RandomField::from_parts(grid, space, 1, u, Some(g), vec![0.0; n_steps], 1).unwrap()
}

fn psi() -> SpaceTimeTest {
    SpaceTimeTest::new(TimeFactor::Affine(1.0, 1.0), Arc::new(Bump::new(vec![0.0], 1.0)))
}

#[test]
fn unit_noise_field_is_backward_increment() {
    let grid = TimeGrid::uniform(0.0, 1.0, 32).unwrap();
    let space = SpatialGrid::with_spacing(-1.0, 1.0, 0.25).unwrap();
    let pb = problem(GeneratorSpec::zero(), NoiseCoefficientSpec::constant(1, 1.0), TerminalCondition::constant(0.0).unwrap());
    let cfg = LsmcConfig::new(RegressionBasis::polynomial(2));
    let field = build_field(&heat(), &pb, &cfg, &space, &grid, 2000, 5, 0, 1).unwrap();
    let noise = sample_paths_with_b(&grid, 1, 1, 2000, 5, 0).unwrap();
    let bt = noise.b(32)[0];
    for i in 0..=32 {
        for j in 0..space.n_points() {
            assert!((field.u(i, j) - (bt - noise.b(i)[0])).abs() < 1e-10);
            assert!(field.grad(i, j).unwrap()[0].abs() < 1e-10);
        }
    }
    assert_eq!(field.gradient_source(), Some(GradientSource::Regression));
}

#[test]
fn infinite_terminal_field_is_closed_form() {
    let grid = TimeGrid::uniform(0.0, 1.0, 64).unwrap();
    let space = SpatialGrid::with_spacing(-1.0, 1.0, 0.5).unwrap();
    let tc = TerminalCondition::singular(Arc::new(|_| f64::INFINITY)).truncate(8.0);
    let pb = problem(GeneratorSpec::power_law(1.0).unwrap(), NoiseCoefficientSpec::zero(1), tc);
    let cfg = LsmcConfig::new(RegressionBasis::piecewise_constant(4)).with_control_variate(false);
    let field = build_field(&heat(), &pb, &cfg, &space, &grid, 400, 1, 0, 1).unwrap();
    for i in 0..=64 {
        let xi = oracles::xi(1.0, 1.0 - grid.node(i), 8.0);
        for j in 0..space.n_points() {
            assert!((field.u(i, j) - xi).abs() < 1e-12, "{i} {j} {} {xi}", field.u(i, j));
        }
    }
    // Finite differences of an x-independent field vanish.
    assert_eq!(field.gradient_source(), Some(GradientSource::FiniteDifference));
    assert!(field.grad(10, 2).unwrap()[0].abs() < 1e-12);
}

#[test]
fn harmonic_terminal_field_is_identity() {
    let grid = TimeGrid::uniform(0.0, 1.0, 32).unwrap();
    let space = SpatialGrid::with_spacing(-1.0, 1.0, 0.25).unwrap();
    let pb = problem(GeneratorSpec::zero(), NoiseCoefficientSpec::zero(1), TerminalCondition::regular(Arc::new(|x: &[f64]| x[0])));
    let cfg = LsmcConfig::new(RegressionBasis::polynomial(1));
    let field = build_field(&heat(), &pb, &cfg, &space, &grid, 4000, 2, 0, 1).unwrap();
    for (j, x) in space.points().iter().enumerate() {
        for i in 0..=32 {
            // Regression noise accumulates over the steps, largest at the box edges.
            assert!((field.u(i, j) - x[0]).abs() < 5e-3, "{i} {x:?} {}", field.u(i, j));
        }
        // Z regresses ΔW²/Δt, whose sample error is about sqrt(2/n) ≈ 0.02.
        assert!((field.grad(0, j).unwrap()[0] - 1.0).abs() < 0.1);
    }
}

#[test]
fn extrapolation_is_reported() {
    let grid = TimeGrid::uniform(0.0, 1.0, 8).unwrap();
    let space = SpatialGrid::with_spacing(-1.0, 1.0, 0.5).unwrap();
    let pb = problem(GeneratorSpec::zero(), NoiseCoefficientSpec::zero(1), TerminalCondition::regular(Arc::new(|x: &[f64]| x[0])));
    let cfg = LsmcConfig::new(RegressionBasis::polynomial(1).with_domain(vec![(-0.5, 0.5)]));
    let field = build_field(&heat(), &pb, &cfg, &space, &grid, 200, 2, 0, 1).unwrap();
    assert!(field.warnings.iter().any(|w| w.contains("extrapolated")));
}

#[test]
fn weighted_norm_of_constants() {
    let grid = TimeGrid::uniform(0.0, 1.0, 10).unwrap();
    let space = SpatialGrid::new(vec![-1.0], vec![1.0], vec![21]).unwrap();
    let nn = grid.n_nodes() * space.n_points();
    let ones = RandomField::from_parts(grid.clone(), space.clone(), 1, vec![1.0; nn], Some(vec![0.0; nn]), vec![0.0; 10], 1).unwrap();
    let r = weighted_norm(&ones, &WeightFunction::new(0.0), 0.0).unwrap();
    assert!((r.value - 2.0).abs() < 1e-12);
    assert!(r.refinement_delta < 1e-12);
    let zeros = RandomField::from_parts(grid.clone(), space.clone(), 1, vec![0.0; nn], Some(vec![0.0; nn]), vec![0.0; 10], 1).unwrap();
    assert_eq!(weighted_norm(&zeros, &WeightFunction::new(0.0), 0.0).unwrap().value, 0.0);
    // Monotone in the integrand.
    let bigger = RandomField::from_parts(grid.clone(), space.clone(), 1, vec![1.5; nn], Some(vec![0.1; nn]), vec![0.0; 10], 1).unwrap();
    let w = WeightFunction::new(2.0);
    assert!(weighted_norm(&bigger, &w, 0.2).unwrap().value > weighted_norm(&ones, &w, 0.2).unwrap().value);
    let whole = RandomField::from_parts(grid, space.whole_space(true), 1, vec![1.0; nn], Some(vec![0.0; nn]), vec![0.0; 10], 1).unwrap();
    assert!(matches!(weighted_norm(&whole, &WeightFunction::new(1.0), 0.0), Err(Error::NonIntegrableWeight(_))));
    assert!(weighted_norm(&whole, &WeightFunction::new(1.5), 0.0).is_ok());
    assert!(matches!(weighted_norm(&ones.without_gradient(), &w, 0.0), Err(Error::Capability(_))));
}

#[test]
fn weighted_norm_tracks_singular_envelope() {
    // u = (q(T-t))^{-1/q} with q = 1: ∫_0^{T-δ} u² dt = 1/δ - 1/T.
    let grid = TimeGrid::uniform(0.0, 1.0, 4096).unwrap();
    let space = SpatialGrid::new(vec![0.0], vec![1.0], vec![3]).unwrap();
    let mut u = Vec::new();
    for &t in grid.nodes() {
        let v = oracles::apriori_bound(1.0, 1.0 - t);
        u.extend([v; 3]);
    }
    let nn = u.len();
    let field = RandomField::from_parts(grid, space, 1, u, Some(vec![0.0; nn]), vec![0.0; 4096], 1).unwrap();
    let w = WeightFunction::new(0.0);
    let norms: Vec<f64> = [0.25, 0.125, 0.0625].iter().map(|&d| weighted_norm(&field, &w, d).unwrap().value).collect();
    for (n, d) in norms.iter().zip([0.25, 0.125, 0.0625]) {
        let exact = 1.0 / d - 1.0;
        assert!((n - exact).abs() / exact < 0.02, "{n} {exact}");
    }
}

#[test]
fn weak_form_zero_test_function() {
    let field = synthetic_heat(16, 31);
    let zero = SpaceTimeTest::new(TimeFactor::Constant(1.0), Arc::new(Constant { dim: 1, value: 0.0 }));
    let pb = problem(GeneratorSpec::zero(), NoiseCoefficientSpec::zero(1), TerminalCondition::regular(Arc::new(|x: &[f64]| x[0] * x[0])));
    let r = weak_form_residual(&field, &zero, &heat(), &pb, 0, 16).unwrap();
    assert_eq!(r.residual, 0.0);
    assert!(r.terms.iter().all(|t| t.value == 0.0));
    assert_eq!(r.terms.len(), 7);
}

#[test]
fn weak_form_is_linear_in_test_function() {
    let field = synthetic_heat(16, 61);
    let pb = problem(GeneratorSpec::linear(-0.5, vec![0.2], 0.1).unwrap(), NoiseCoefficientSpec::zero(1), TerminalCondition::regular(Arc::new(|x: &[f64]| x[0] * x[0])));
    let a: Arc<dyn TestFunction> = Arc::new(Bump::new(vec![0.0], 1.0));
    let b: Arc<dyn TestFunction> = Arc::new(Bump::new(vec![0.3], 0.8).with_amplitude(2.0));
    let sde = SdeCoefficients::constant(vec![0.4], vec![1.2], 1).unwrap();
    let t = TimeFactor::Exp(0.5);
    let ra = weak_form_residual(&field, &SpaceTimeTest::new(t, a.clone()), &sde, &pb, 2, 14).unwrap();
    let rb = weak_form_residual(&field, &SpaceTimeTest::new(t, b.clone()), &sde, &pb, 2, 14).unwrap();
    let rs = weak_form_residual(&field, &SpaceTimeTest::new(t, Arc::new(Sum(a, b))), &sde, &pb, 2, 14).unwrap();
    for k in 0..7 {
        let sum = ra.terms[k].value + rb.terms[k].value;
        assert!((rs.terms[k].value - sum).abs() <= 1e-12 * (1.0 + sum.abs()), "{}", ra.terms[k].name);
    }
}

#[test]
fn weak_form_exact_heat_solution_is_first_order_in_time() {
    let pb = problem(GeneratorSpec::zero(), NoiseCoefficientSpec::zero(1), TerminalCondition::regular(Arc::new(|x: &[f64]| x[0] * x[0])));
    let res: Vec<f64> = [8, 16, 32, 64]
        .iter()
        .map(|&n| weak_form_residual(&synthetic_heat(n, 121), &psi(), &heat(), &pb, 0, n).unwrap().residual)
        .collect();
    let dts = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
    let slope = stats::log_log_slope(&dts, &res);
    assert!((slope - 1.0).abs() < 0.05, "{slope} {res:?}");
}

#[test]
fn weak_form_heat_from_solver_converges() {
    let sde = heat();
    let pb = problem(GeneratorSpec::zero(), NoiseCoefficientSpec::zero(1), TerminalCondition::regular(Arc::new(|x: &[f64]| x[0] * x[0])));
    let cfg = LsmcConfig::new(RegressionBasis::polynomial(2));
    let mut dts = Vec::new();
    let mut res = Vec::new();
    for (n, hx) in [(8, 0.1), (16, 0.05), (32, 0.025), (64, 0.0125)] {
        let grid = TimeGrid::uniform(0.0, 1.0, n).unwrap();
        let space = SpatialGrid::with_spacing(-1.5, 1.5, hx).unwrap();
        let field = build_field(&sde, &pb, &cfg, &space, &grid, 4000, 3, 0, 1).unwrap();
        res.push(weak_form_residual(&field, &psi(), &sde, &pb, 0, n).unwrap().residual);
        dts.push(1.0 / n as f64);
    }
    let slope = stats::log_log_slope(&dts, &res);
    assert!(slope >= 0.8, "{slope} {res:?}");
}

#[test]
fn weak_form_unit_noise_converges_in_time() {
    let sde = heat();
    let pb = problem(GeneratorSpec::zero(), NoiseCoefficientSpec::constant(1, 1.0), TerminalCondition::constant(0.0).unwrap());
    let cfg = LsmcConfig::new(RegressionBasis::polynomial(2));
    let space = SpatialGrid::with_spacing(-1.5, 1.5, 0.05).unwrap();
    let fine = TimeGrid::uniform(0.0, 1.0, 512).unwrap();
    let mut res = Vec::new();
    let mut affine = Vec::new();
    let exp_psi = SpaceTimeTest::new(TimeFactor::Exp(1.0), Arc::new(Bump::new(vec![0.0], 1.0)));
    for factor in [32, 16, 8, 4, 2, 1] {
        let grid = fine.coarsen(factor).unwrap();
        let noise = sample_paths_with_b(&fine, 1, 1, 200, 9, 0).unwrap().coarsen(factor).unwrap();
        let init = InitialLaw::UniformBox { lo: vec![-1.5], hi: vec![1.5] };
        let fwd = euler_maruyama(&sde, 0.0, &init, &noise).unwrap();
        let sol = solve_lsmc(&fwd, &pb, &noise, &cfg).unwrap();
        let field = field_from_solution(&sol, &sde, &space, &noise).unwrap();
        let r = weak_form_residual(&field, &exp_psi, &sde, &pb, 0, grid.n_steps()).unwrap();
        assert!(r.term("diffusion").unwrap().abs() < 1e-9);
        res.push(r.residual);
        affine.push(weak_form_residual(&field, &psi(), &sde, &pb, 0, grid.n_steps()).unwrap().residual);
    }
    assert!(res[5] < 0.25 * res[0], "{res:?}");
    assert!(res.windows(2).all(|w| w[1] < w[0]), "{res:?}");
    // Summation by parts is exact for an affine time factor.
    assert!(affine.iter().all(|r| *r < 1e-12), "{affine:?}");
}

#[test]
fn weak_form_needs_gradient() {
    let field = synthetic_heat(8, 11).without_gradient();
    let pb = problem(GeneratorSpec::zero(), NoiseCoefficientSpec::zero(1), TerminalCondition::constant(0.0).unwrap());
    assert!(matches!(weak_form_residual(&field, &psi(), &heat(), &pb, 0, 8), Err(Error::Capability(_))));
}

#[test]
fn trace_curves() {
    let grid = TimeGrid::uniform(0.0, 1.0, 64).unwrap();
    let space = SpatialGrid::with_spacing(-1.0, 1.0, 0.05).unwrap();
    let tc = TerminalCondition::singular(Arc::new(|_| f64::INFINITY)).truncate(1024.0);
    let pb = problem(GeneratorSpec::power_law(1.0).unwrap(), NoiseCoefficientSpec::zero(1), tc.clone());
    let cfg = LsmcConfig::new(RegressionBasis::piecewise_constant(4)).with_control_variate(false);
    let field = build_field(&heat(), &pb, &cfg, &space, &grid, 400, 1, 0, 1).unwrap();
    let phi = Bump::new(vec![0.0], 0.9);
    let curve = terminal_trace(std::slice::from_ref(&field), &phi, &tc, Some(1.0), false).unwrap();
    for p in &curve.points {
        if p.t >= 0.5 && p.node <= 60 {
            let env = p.envelope.unwrap();
            assert!((p.value - env).abs() <= 0.1 * env, "{p:?}");
        }
    }
    let zero = Constant { dim: 1, value: 0.0 };
    let flat = terminal_trace(std::slice::from_ref(&field), &zero, &tc, Some(1.0), false).unwrap();
    assert!(flat.points.iter().all(|p| p.value == 0.0));
    assert!(matches!(terminal_trace(&[field], &phi, &tc, Some(1.0), true), Err(Error::Mode(_))));
}

#[test]
fn trace_support_avoiding_singular_set() {
    let inv = TerminalCondition::singular(Arc::new(|x: &[f64]| 1.0 / x[0].abs()))
        .with_singular_set(Arc::new(|x: &[f64]| x[0] == 0.0), Some(Arc::new(|x: &[f64]| x[0].abs())));
    let space = SpatialGrid::with_spacing(-2.0, 2.0, 0.05).unwrap();
    assert!(support_touches_singular_set(&Bump::new(vec![0.5], 0.6), &inv, &space));
    assert!(!support_touches_singular_set(&Bump::new(vec![1.2], 0.6), &inv, &space));
    // Lattice scan when no distance is known.
    let inf_right = TerminalCondition::singular(Arc::new(|x: &[f64]| if x[0] > 1.0 { f64::INFINITY } else { 0.0 }));
    assert!(support_touches_singular_set(&Bump::new(vec![0.5], 0.6), &inf_right, &space));
    assert!(!support_touches_singular_set(&Bump::new(vec![-0.5], 0.6), &inf_right, &space));
}

#[test]
fn bounded_trace_reaches_target_at_terminal_node() {
    let grid = TimeGrid::uniform(0.0, 1.0, 32).unwrap();
    let space = SpatialGrid::with_spacing(-2.0, 2.0, 0.05).unwrap();
    let h = TerminalCondition::bounded(Arc::new(|x: &[f64]| 1.0 / (1.0 + x[0] * x[0])), 1.0).unwrap();
    let pb = problem(GeneratorSpec::power_law(1.0).unwrap(), NoiseCoefficientSpec::linear(0.25, vec![]).unwrap(), h.clone());
    let cfg = LsmcConfig::new(RegressionBasis::piecewise_constant(16)).with_control_variate(false);
    let fields: Vec<RandomField> = (0..3)
        .map(|b| build_field(&heat(), &pb, &cfg, &space, &grid, 2000, 4, b, 1).unwrap())
        .collect();
    let phi = Bump::new(vec![0.0], 1.0);
    let curve = terminal_trace(&fields, &phi, &h, None, true).unwrap();
    let last = curve.points.last().unwrap();
    assert!((last.value - curve.target.unwrap()).abs() < 1e-14);
    assert!(curve.points[0].se > 0.0);
}

#[test]
fn malliavin_identity_linear_case() {
    let grid = TimeGrid::uniform(0.0, 1.0, 64).unwrap();
    let noise = sample_paths_with_b(&grid, 1, 1, 20000, 11, 0).unwrap();
    let sde = heat();
    let fwd = euler_maruyama(&sde, 0.0, &InitialLaw::Point(vec![0.0]), &noise).unwrap();
    let pb = problem(GeneratorSpec::zero(), NoiseCoefficientSpec::zero(1), TerminalCondition::regular(Arc::new(|x: &[f64]| x[0])));
    let sol = solve_lsmc(&fwd, &pb, &noise, &LsmcConfig::new(RegressionBasis::polynomial(1))).unwrap();
    let theta = Bump::new(vec![0.5], 1.5);
    let gap = malliavin_identity_check(&sol, &fwd, &sde, &theta, 4, 64).unwrap();
    assert!(gap.passed, "{gap:?}");
    assert!(gap.lhs.mean.abs() > 10.0 * gap.gap_se);
    let flat = Constant { dim: 1, value: 2.0 };
    let zero = malliavin_identity_check(&sol, &fwd, &sde, &flat, 4, 64).unwrap();
    assert_eq!(zero.lhs.mean, 0.0);
    assert_eq!(zero.rhs.mean, 0.0);
    assert!(zero.passed);
    let ou = SdeCoefficients::ornstein_uhlenbeck(1.0, 1.0);
    assert!(matches!(malliavin_identity_check(&sol, &fwd, &ou, &theta, 4, 64), Err(Error::Mode(_))));
    assert!(matches!(malliavin_identity_check(&sol, &fwd, &sde, &theta, 0, 64), Err(Error::Config(_))));
}

#[test]
fn malliavin_identity_unit_noise_symmetry() {
    let grid = TimeGrid::uniform(0.0, 1.0, 64).unwrap();
    let noise = sample_paths_with_b(&grid, 1, 1, 20000, 12, 0).unwrap();
    let sde = heat();
    let fwd = euler_maruyama(&sde, 0.0, &InitialLaw::Point(vec![0.0]), &noise).unwrap();
    let pb = problem(GeneratorSpec::zero(), NoiseCoefficientSpec::constant(1, 1.0), TerminalCondition::constant(0.0).unwrap());
    let sol = solve_lsmc(&fwd, &pb, &noise, &LsmcConfig::new(RegressionBasis::polynomial(2))).unwrap();
    let gap = malliavin_identity_check(&sol, &fwd, &sde, &Bump::new(vec![0.0], 1.5), 4, 64).unwrap();
    assert!(gap.lhs.mean.abs() < 1e-9);
    assert!(gap.passed, "{gap:?}");
}
