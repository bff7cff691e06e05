//! Forward diffusion `dX = b(t, X) dt + σ(t, X) dW` and its generator.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::DualBrownianPaths;
use crate::test_fn::{fd_gradient, fd_hessian, fd_step, TestFunction};

/// `(t, x, out)`, writes `b(t, x)` into `out` (length `d`).
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, out)`, writes `σ(t, x)` into `out`, row-major `d × k`.
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

const INIT_STREAM_BASE: u64 = 1 << 62;

#[derive(Clone)]
pub struct SdeCoefficients {
    dim: usize,
    noise_dim: usize,
    drift: DriftFn,
    diffusion: DiffusionFn,
    pub lipschitz_k: f64,
    /// Flag (B): `b` and `σ` bounded.
    pub bounded: bool,
    /// Flag (E): `σσ* ≥ λ I` with this `λ` (0 when not claimed).
    pub elliptic_lambda: f64,
    /// Flag (D): bounded second derivatives claimed.
    pub smooth: bool,
    pub constant_coefficients: bool,
}

impl fmt::Debug for SdeCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeCoefficients")
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("lipschitz_k", &self.lipschitz_k)
            .field("bounded", &self.bounded)
            .field("elliptic_lambda", &self.elliptic_lambda)
            .field("smooth", &self.smooth)
            .field("constant_coefficients", &self.constant_coefficients)
            .finish_non_exhaustive()
    }
}

impl SdeCoefficients {
    pub fn new(dim: usize, noise_dim: usize, drift: DriftFn, diffusion: DiffusionFn) -> Self {
        Self {
            dim,
            noise_dim,
            drift,
            diffusion,
            lipschitz_k: 0.0,
            bounded: false,
            elliptic_lambda: 0.0,
            smooth: false,
            constant_coefficients: false,
        }
    }

    /// Constant drift vector and constant `d × k` diffusion matrix.
    pub fn constant(b: Vec<f64>, sigma: Vec<f64>, noise_dim: usize) -> Result<Self> {
        let dim = b.len();
        if dim == 0 || sigma.len() != dim * noise_dim {
            return Err(Error::Shape(format!(
                "constant coefficients: b has {dim} entries, sigma has {} (expected {})",
                sigma.len(),
                dim * noise_dim
            )));
        }
        let lambda = min_eigen_sigma_sigma(&sigma, dim, noise_dim);
        let s = sigma.clone();
        let mut c = Self::new(
            dim,
            noise_dim,
            Arc::new(move |_, _, out: &mut [f64]| out.copy_from_slice(&b)),
            Arc::new(move |_, _, out: &mut [f64]| out.copy_from_slice(&s)),
        );
        c.bounded = true;
        c.smooth = true;
        c.constant_coefficients = true;
        c.elliptic_lambda = lambda.max(0.0);
        Ok(c)
    }

    /// One-dimensional `dX = -a X dt + s dW`.
    pub fn ornstein_uhlenbeck(a: f64, s: f64) -> Self {
        let mut c = Self::new(
            1,
            1,
            Arc::new(move |_, x: &[f64], out: &mut [f64]| out[0] = -a * x[0]),
            Arc::new(move |_, _, out: &mut [f64]| out[0] = s),
        );
        c.lipschitz_k = a.abs().max(0.0);
        c.elliptic_lambda = s * s;
        c
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    pub fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    /// `σσ*(t, x)`, row-major `d × d`.
    pub fn sigma_sigma_t(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let (d, k) = (self.dim, self.noise_dim);
        let mut s = vec![0.0; d * k];
        self.diffusion(t, x, &mut s);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..k).map(|l| s[i * k + l] * s[j * k + l]).sum();
            }
        }
        a
    }

    /// `Ã_i = ½ Σ_j ∂_j (σσ*)_{ji}` by central differences; exactly zero for
    /// constant coefficients.
    pub fn a_tilde(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        if self.constant_coefficients {
            return out;
        }
        let h = fd_step(x);
        let mut p = x.to_vec();
        for j in 0..d {
            p[j] = x[j] + h;
            let up = self.sigma_sigma_t(t, &p);
            p[j] = x[j] - h;
            let down = self.sigma_sigma_t(t, &p);
            p[j] = x[j];
            for (i, o) in out.iter_mut().enumerate() {
                *o += 0.5 * (up[j * d + i] - down[j * d + i]) / (2.0 * h);
            }
        }
        out
    }

    /// Spot-checks finiteness and the declared ellipticity on standard-normal
    /// probe points. Returns the list of failed checks.
    pub fn check_flags(&self, probes: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failures = Vec::new();
        let mut b = vec![0.0; self.dim];
        let mut s = vec![0.0; self.dim * self.noise_dim];
        for _ in 0..probes {
            let t: f64 = rng.random();
            let x: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
            self.drift(t, &x, &mut b);
            self.diffusion(t, &x, &mut s);
            if b.iter().chain(&s).any(|v| !v.is_finite()) {
                failures.push(format!("non-finite coefficients at t={t}, x={x:?}"));
                break;
            }
            if self.elliptic_lambda > 0.0 {
                let lam = min_eigen_sigma_sigma(&s, self.dim, self.noise_dim);
                if lam < self.elliptic_lambda * (1.0 - 1e-12) {
                    failures.push(format!(
                        "ellipticity {} claimed, found {lam} at t={t}, x={x:?}",
                        self.elliptic_lambda
                    ));
                    break;
                }
            }
        }
        failures
    }
}

// Smallest eigenvalue of σσ*.
fn min_eigen_sigma_sigma(s: &[f64], d: usize, k: usize) -> f64 {
    let mut a = nalgebra::DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = (0..k).map(|l| s[i * k + l] * s[j * k + l]).sum();
        }
    }
    a.symmetric_eigenvalues().min()
}

/// Law of `X` at the start time.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// Uniform on a box. In one dimension the draws are stratified, one per
    /// equal-width cell, so a regression on `X` sees the whole box.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point(x) => x.len(),
            InitialLaw::UniformBox { lo, .. } => lo.len(),
        }
    }

    fn draw(&self, path: usize, n_paths: usize, seed: u64, out: &mut [f64]) {
        match self {
            InitialLaw::Point(x) => out.copy_from_slice(x),
            InitialLaw::UniformBox { lo, hi } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(INIT_STREAM_BASE + path as u64);
                if lo.len() == 1 {
                    let u: f64 = rng.random();
                    out[0] = lo[0] + (hi[0] - lo[0]) * (path as f64 + u) / n_paths as f64;
                } else {
                    for (k, o) in out.iter_mut().enumerate() {
                        let u: f64 = rng.random();
                        *o = lo[k] + (hi[k] - lo[k]) * u;
                    }
                }
            }
        }
    }
}

/// Simulated forward paths, path-major `[path][node][component]`.
#[derive(Debug, Clone)]
pub struct ForwardPaths {
    dim: usize,
    n_paths: usize,
    n_nodes: usize,
    start_index: usize,
    start_time: f64,
    x: Vec<f64>,
}

impl ForwardPaths {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn x(&self, path: usize, node: usize) -> &[f64] {
        let s = (path * self.n_nodes + node) * self.dim;
        &self.x[s..s + self.dim]
    }

    /// Component 0 of every path at `node`.
    pub fn column(&self, node: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.x(p, node)[0]).collect()
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        let stride = self.n_nodes * self.dim;
        let mut x = Vec::with_capacity(self.x.len());
        for &p in order {
            x.extend_from_slice(&self.x[p * stride..(p + 1) * stride]);
        }
        Self { x, ..self.clone() }
    }
}

/// Euler–Maruyama from `start_time`, with `X` frozen at its initial value on
/// earlier nodes.
pub fn euler_maruyama(
    coeffs: &SdeCoefficients,
    start_time: f64,
    init: &InitialLaw,
    noise: &DualBrownianPaths,
) -> Result<ForwardPaths> {
    let grid: &TimeGrid = noise.grid();
    let start_index = grid.index_of(start_time).ok_or_else(|| {
        Error::Config(format!(
            "start time {start_time} is not a node of the grid on [{}, {}]",
            grid.t_start(),
            grid.t_end()
        ))
    })?;
    let (d, k) = (coeffs.dim, coeffs.noise_dim);
    if noise.w_dim() != k {
        return Err(Error::Shape(format!(
            "W has {} components, sigma has {k} columns",
            noise.w_dim()
        )));
    }
    if init.dim() != d {
        return Err(Error::Shape(format!(
            "initial point has dimension {}, the SDE has {d}",
            init.dim()
        )));
    }
    let n_nodes = grid.n_nodes();
    let n_paths = noise.n_paths();
    let dt = grid.dt();
    let nodes = grid.nodes();
    let mut x = vec![0.0; n_paths * n_nodes * d];
    let failures: Vec<Option<(usize, String)>> = x
        .par_chunks_mut(n_nodes * d)
        .enumerate()
        .map(|(p, path)| {
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * k];
            init.draw(p, n_paths, noise.seed(), &mut path[..d]);
            for i in 1..=start_index {
                path.copy_within(0..d, i * d);
            }
            for i in start_index..n_nodes - 1 {
                let (head, tail) = path.split_at_mut((i + 1) * d);
                let xi = &head[i * d..];
                coeffs.drift(nodes[i], xi, &mut b);
                coeffs.diffusion(nodes[i], xi, &mut s);
                for r in 0..d {
                    let mut v = xi[r] + b[r] * dt;
                    for l in 0..k {
                        v += s[r * k + l] * noise.dw(p, i, l);
                    }
                    tail[r] = v;
                }
                if tail[..d].iter().any(|v| !v.is_finite()) {
                    return Some((i, format!("path {p}: X = {:?}", &tail[..d])));
                }
            }
            None
        })
        .collect();
    if let Some((step, detail)) = failures.into_iter().flatten().min_by_key(|(s, _)| *s) {
        return Err(Error::NumericalBlowup { step, detail });
    }
    Ok(ForwardPaths {
        dim: d,
        n_paths,
        n_nodes,
        start_index,
        start_time,
        x,
    })
}

/// How `apply_generator` obtains derivatives of the test function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Derivatives {
    /// Closed-form derivatives required.
    Analytic,
    /// Central differences with the given step, or the default step.
    FiniteDifference(Option<f64>),
    /// Closed form when available, central differences otherwise.
    Auto,
}

/// `Lθ(t, x) = ½ Tr(σσ* D²θ) + b · ∇θ`.
pub fn apply_generator(
    coeffs: &SdeCoefficients,
    theta: &dyn TestFunction,
    t: f64,
    x: &[f64],
    mode: Derivatives,
) -> Result<f64> {
    let d = coeffs.dim;
    if theta.dim() != d || x.len() != d {
        return Err(Error::Shape(format!(
            "generator in dimension {d}, test function in {}, point in {}",
            theta.dim(),
            x.len()
        )));
    }
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let fd = |grad: &mut [f64], hess: &mut [f64], h: Option<f64>| {
        let h = h.unwrap_or_else(|| fd_step(x));
        fd_gradient(theta, x, h, grad);
        fd_hessian(theta, x, h, hess);
    };
    match mode {
        Derivatives::Analytic => {
            if !theta.gradient(x, &mut grad) || !theta.hessian(x, &mut hess) {
                return Err(Error::Capability(
                    "test function has no closed-form derivatives".into(),
                ));
            }
        }
        Derivatives::FiniteDifference(h) => fd(&mut grad, &mut hess, h),
        Derivatives::Auto => {
            if !theta.gradient(x, &mut grad) || !theta.hessian(x, &mut hess) {
                fd(&mut grad, &mut hess, None);
            }
        }
    }
    let a = coeffs.sigma_sigma_t(t, x);
    let mut b = vec![0.0; d];
    coeffs.drift(t, x, &mut b);
    let trace: f64 = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| a[i * d + j] * hess[j * d + i])
        .sum();
    let transport: f64 = b.iter().zip(&grad).map(|(bi, gi)| bi * gi).sum();
    Ok(0.5 * trace + transport)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_paths;
    use crate::test_fn::{Bump, Constant, FnTest, Quadratic};

    fn noise(n: usize, paths: usize, seed: u64) -> DualBrownianPaths {
        let g = TimeGrid::uniform(0.0, 1.0, n).unwrap();
        sample_paths(&g, 1, 1, paths, seed).unwrap()
    }

    #[test]
    fn zero_coefficients_freeze_the_state() {
        let c = SdeCoefficients::constant(vec![0.0], vec![0.0], 1).unwrap();
        let n = noise(16, 4, 1);
        let x = euler_maruyama(&c, 0.0, &InitialLaw::Point(vec![0.7]), &n).unwrap();
        for p in 0..4 {
            for i in 0..=16 {
                assert_eq!(x.x(p, i), &[0.7]);
            }
        }
    }

    #[test]
    fn unit_diffusion_reproduces_w() {
        let c = SdeCoefficients::constant(vec![0.0], vec![1.0], 1).unwrap();
        let n = noise(16, 4, 2);
        let x = euler_maruyama(&c, 0.25, &InitialLaw::Point(vec![1.0]), &n).unwrap();
        for p in 0..4 {
            for i in 0..=4 {
                assert_eq!(x.x(p, i), &[1.0]);
            }
            for i in 4..=16 {
                let expect = 1.0 + n.w(p, i)[0] - n.w(p, 4)[0];
                assert!((x.x(p, i)[0] - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn start_time_off_grid_rejected() {
        let c = SdeCoefficients::constant(vec![0.0], vec![1.0], 1).unwrap();
        let n = noise(4, 1, 0);
        assert!(euler_maruyama(&c, 0.3, &InitialLaw::Point(vec![0.0]), &n).is_err());
    }

    #[test]
    fn blowup_names_the_step() {
        let c = SdeCoefficients::new(
            1,
            1,
            Arc::new(|_, x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0] * 1e200),
            Arc::new(|_, _, o: &mut [f64]| o[0] = 0.0),
        );
        let n = noise(8, 2, 0);
        match euler_maruyama(&c, 0.0, &InitialLaw::Point(vec![1.0]), &n) {
            Err(Error::NumericalBlowup { step, .. }) => assert!(step <= 1),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn ou_strong_error_shrinks_with_step() {
        // Reference on 2^12 steps; coarse runs observe the same Brownian path.
        let c = SdeCoefficients::ornstein_uhlenbeck(1.0, 0.5);
        let fine = noise(4096, 400, 5);
        let reference = euler_maruyama(&c, 0.0, &InitialLaw::Point(vec![1.0]), &fine).unwrap();
        let mut errs = Vec::new();
        for factor in [64usize, 32, 16] {
            let coarse = fine.coarsen(factor).unwrap();
            let x = euler_maruyama(&c, 0.0, &InitialLaw::Point(vec![1.0]), &coarse).unwrap();
            let n = coarse.grid().n_steps();
            let mse: f64 = (0..400)
                .map(|p| (x.x(p, n)[0] - reference.x(p, 4096)[0]).powi(2))
                .sum::<f64>()
                / 400.0;
            errs.push(mse.sqrt());
        }
        // Additive noise: Euler is strong order one here.
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 1.6 && ratio < 2.5, "{errs:?}");
        }
    }

    #[test]
    fn monotone_in_initial_point() {
        let c = SdeCoefficients::ornstein_uhlenbeck(0.8, 1.0);
        let n = noise(64, 50, 3);
        let lo = euler_maruyama(&c, 0.0, &InitialLaw::Point(vec![-0.2]), &n).unwrap();
        let hi = euler_maruyama(&c, 0.0, &InitialLaw::Point(vec![0.1]), &n).unwrap();
        for p in 0..50 {
            for i in 0..=64 {
                assert!(lo.x(p, i)[0] <= hi.x(p, i)[0]);
            }
        }
    }

    #[test]
    fn stratified_box_covers_every_cell() {
        let c = SdeCoefficients::constant(vec![0.0], vec![1.0], 1).unwrap();
        let n = noise(2, 10, 3);
        let law = InitialLaw::UniformBox {
            lo: vec![-1.0],
            hi: vec![1.0],
        };
        let x = euler_maruyama(&c, 0.0, &law, &n).unwrap();
        for p in 0..10 {
            let v = x.x(p, 0)[0];
            let lo = -1.0 + 0.2 * p as f64;
            assert!(v >= lo && v < lo + 0.2);
        }
    }

    #[test]
    fn generator_oracles() {
        let c = SdeCoefficients::constant(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let q = Quadratic { dim: 2, scale: 1.0 };
        let v = apply_generator(&c, &q, 0.0, &[0.3, -2.0], Derivatives::Analytic).unwrap();
        assert!((v - 2.0).abs() < 1e-14);
        let k = Constant { dim: 2, value: 3.0 };
        assert_eq!(
            apply_generator(&c, &k, 0.0, &[1.0, 1.0], Derivatives::Analytic).unwrap(),
            0.0
        );
    }

    #[test]
    fn generator_fd_agrees_with_analytic() {
        let c = SdeCoefficients::ornstein_uhlenbeck(0.7, 0.9);
        let b = Bump::new(vec![0.1], 1.2);
        let x = [0.4];
        let exact = apply_generator(&c, &b, 0.0, &x, Derivatives::Analytic).unwrap();
        let e1 = (apply_generator(&c, &b, 0.0, &x, Derivatives::FiniteDifference(Some(1e-2)))
            .unwrap()
            - exact)
            .abs();
        let e2 = (apply_generator(&c, &b, 0.0, &x, Derivatives::FiniteDifference(Some(5e-3)))
            .unwrap()
            - exact)
            .abs();
        assert!(e1 / e2 > 3.5 && e1 / e2 < 4.5, "{e1} {e2}");
        let auto = apply_generator(&c, &b, 0.0, &x, Derivatives::Auto).unwrap();
        assert_eq!(auto, exact);
    }

    #[test]
    fn generator_without_derivatives() {
        let c = SdeCoefficients::ornstein_uhlenbeck(0.0, 1.0);
        let f = FnTest::new(1, |x| x[0] * x[0]);
        assert!(matches!(
            apply_generator(&c, &f, 0.0, &[1.0], Derivatives::Analytic),
            Err(Error::Capability(_))
        ));
        let v = apply_generator(&c, &f, 0.0, &[1.0], Derivatives::Auto).unwrap();
        // Second differences at the default step lose about eps^{1/3}.
        assert!((v - 1.0).abs() < 1e-4, "{v}");
    }

    #[test]
    fn a_tilde_of_state_dependent_diffusion() {
        // σ(x) = 1 + x²/2: σσ* = (1 + x²/2)², Ã = ½ · 2(1 + x²/2) x.
        let c = SdeCoefficients::new(
            1,
            1,
            Arc::new(|_, _, o: &mut [f64]| o[0] = 0.0),
            Arc::new(|_, x: &[f64], o: &mut [f64]| o[0] = 1.0 + 0.5 * x[0] * x[0]),
        );
        let x = 0.6;
        let expect = (1.0 + 0.5 * x * x) * x;
        assert!((c.a_tilde(0.0, &[x])[0] - expect).abs() < 1e-8);
        let k = SdeCoefficients::constant(vec![1.0], vec![2.0], 1).unwrap();
        assert_eq!(k.a_tilde(0.0, &[3.0]), vec![0.0]);
        assert_eq!(k.elliptic_lambda, 4.0);
    }

    #[test]
    fn ellipticity_claim_is_checked() {
        let mut c = SdeCoefficients::ornstein_uhlenbeck(1.0, 0.5);
        assert!(c.check_flags(50, 1).is_empty());
        c.elliptic_lambda = 1.0;
        assert_eq!(c.check_flags(50, 1).len(), 1);
    }
}
