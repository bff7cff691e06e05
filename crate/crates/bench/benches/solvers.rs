use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bdsde_core::singular::{geometric_levels, solve_singular_ladder};
use bdsde_core::{
    euler_maruyama, picard_solve, sample_paths, solve_lsmc, BdsdeProblem, DualBrownianPaths, ForwardPaths,
    GeneratorKind, GeneratorSpec, InitialLaw, LsmcConfig, NoiseCoefficientSpec, PicardConfig, RegressionBasis,
    SdeCoefficients, TerminalCondition, TimeGrid,
};

const STEPS: usize = 64;
const PATHS: usize = 4000;

fn setup(n_paths: usize) -> (DualBrownianPaths, ForwardPaths) {
    let grid = TimeGrid::uniform(0.0, 1.0, STEPS).unwrap();
    let noise = sample_paths(&grid, 1, 1, n_paths, 11).unwrap();
    let sde = SdeCoefficients::constant(vec![0.0], vec![1.0], 1).unwrap();
    let init = InitialLaw::UniformBox { lo: vec![-1.5], hi: vec![1.5] };
    let fwd = euler_maruyama(&sde, 0.0, &init, &noise).unwrap();
    (noise, fwd)
}

fn bounded_problem() -> BdsdeProblem {
    BdsdeProblem {
        f: GeneratorSpec::power_law(1.0).unwrap(),
        g: NoiseCoefficientSpec::linear(0.0, vec![0.3]).unwrap(),
        terminal: TerminalCondition::bounded(Arc::new(|x: &[f64]| 1.0 / (1.0 + x[0] * x[0])), 1.0).unwrap(),
    }
}

fn paths(c: &mut Criterion) {
    let grid = TimeGrid::uniform(0.0, 1.0, STEPS).unwrap();
    let sde = SdeCoefficients::constant(vec![0.0], vec![1.0], 1).unwrap();
    c.bench_function("sample_paths", |b| b.iter(|| sample_paths(&grid, 1, 1, black_box(PATHS), 3).unwrap()));
    let noise = sample_paths(&grid, 1, 1, PATHS, 3).unwrap();
    c.bench_function("euler_maruyama", |b| {
        b.iter(|| euler_maruyama(&sde, 0.0, &InitialLaw::Point(vec![0.0]), black_box(&noise)).unwrap())
    });
}

fn lsmc(c: &mut Criterion) {
    let (noise, fwd) = setup(PATHS);
    let problem = bounded_problem();
    let mut group = c.benchmark_group("lsmc");
    for (name, basis) in [
        ("poly3", RegressionBasis::polynomial(3)),
        ("pc32", RegressionBasis::piecewise_constant(32)),
        ("ll16", RegressionBasis::local_linear(16)),
    ] {
        let cfg = LsmcConfig::new(basis);
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| solve_lsmc(&fwd, &problem, &noise, cfg).unwrap())
        });
    }
    group.finish();
}

fn picard(c: &mut Criterion) {
    let (noise, fwd) = setup(1000);
    let f = GeneratorSpec::new(GeneratorKind::Lipschitz, 0.0, 1.0, Arc::new(|_, _, y, z: &[f64]| -0.5 * y + z[0]))
        .unwrap();
    let problem = BdsdeProblem {
        f,
        g: NoiseCoefficientSpec::linear(0.5, vec![0.25]).unwrap(),
        terminal: TerminalCondition::regular(Arc::new(|x: &[f64]| x[0].cos())),
    };
    let cfg = LsmcConfig::new(RegressionBasis::polynomial(3));
    let pcfg = PicardConfig { max_sweeps: 8, ..PicardConfig::default() };
    c.bench_function("picard_8_sweeps", |b| b.iter(|| picard_solve(&fwd, &problem, &noise, &cfg, &pcfg).unwrap()));
}

fn ladder(c: &mut Criterion) {
    let (noise, fwd) = setup(2000);
    let g = NoiseCoefficientSpec::linear(0.0, vec![0.3]).unwrap();
    let h = TerminalCondition::singular(Arc::new(|x: &[f64]| 1.0 / x[0].abs()));
    let cfg = LsmcConfig::new(RegressionBasis::piecewise_constant(24)).with_control_variate(false);
    let levels = geometric_levels(6);
    c.bench_function("ladder_6_levels", |b| {
        b.iter(|| solve_singular_ladder(&fwd, 1.0, &g, &h, &levels, &noise, &cfg, &[0.25]).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = paths, lsmc, picard, ladder
}
criterion_main!(benches);
