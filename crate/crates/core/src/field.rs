//! The random field `u(t, x) = Y_t^{t,x}` on a space-time lattice for one
//! realized `B` path, with weighted norms, weak-form residuals, terminal
//! traces and the Gaussian integration-by-parts identity.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::drivers::TerminalCondition;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::{sample_paths_with_b, DualBrownianPaths};
use crate::oracles;
use crate::regression::BasisFamily;
use crate::sde::{euler_maruyama, ForwardPaths, InitialLaw, SdeCoefficients};
use crate::solver::{solve_lsmc, BackwardSolution, BdsdeProblem, LsmcConfig};
use crate::stats::{self, Estimate};
use crate::test_fn::{fd_gradient, fd_hessian, fd_step, SpaceTimeTest, TestFunction};

/// `ρ(x) = (1 + |x|)^κ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightFunction {
    pub kappa: f64,
}

impl WeightFunction {
    pub fn new(kappa: f64) -> Self {
        Self { kappa }
    }

    pub fn rho(&self, x: &[f64]) -> f64 {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        (1.0 + r).powf(self.kappa)
    }

    /// `ρ^{-1} ∈ L¹(R^d)` iff `κ > d`.
    pub fn integrable(&self, d: usize) -> bool {
        self.kappa > d as f64
    }
}

/// Rectangular lattice with `n[k] ≥ 2` points per axis, last axis fastest.
/// `whole_space` marks a lattice standing in for all of `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpatialGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
    pub whole_space: bool,
}

impl SpatialGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, n: Vec<usize>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.len() != n.len() {
            return Err(Error::Shape("spatial grid: lo, hi and n must have the same non-zero length".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::Config("spatial grid needs finite lo < hi on every axis".into()));
        }
        if n.iter().any(|&k| k < 2) {
            return Err(Error::Config("spatial grid needs at least 2 points per axis".into()));
        }
        Ok(Self {
            lo,
            hi,
            n,
            whole_space: false,
        })
    }

    /// One-dimensional lattice with spacing `h_x` (rounded to fit the box).
    pub fn with_spacing(lo: f64, hi: f64, h_x: f64) -> Result<Self> {
        if !(h_x > 0.0) {
            return Err(Error::Config("h_x must be positive".into()));
        }
        let n = ((hi - lo) / h_x).round().max(1.0) as usize + 1;
        Self::new(vec![lo], vec![hi], vec![n])
    }

    pub fn whole_space(mut self, on: bool) -> Self {
        self.whole_space = on;
        self
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn n_points(&self) -> usize {
        self.n.iter().product()
    }

    pub fn spacing(&self, k: usize) -> f64 {
        (self.hi[k] - self.lo[k]) / (self.n[k] - 1) as f64
    }

    fn multi_index(&self, mut j: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            idx[k] = j % self.n[k];
            j /= self.n[k];
        }
        idx
    }

    fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.n).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn point(&self, j: usize) -> Vec<f64> {
        self.multi_index(j)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.lo[k] + i as f64 * self.spacing(k))
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.n_points()).map(|j| self.point(j)).collect()
    }

    /// Tensor trapezoid weights.
    pub fn weights(&self) -> Vec<f64> {
        self.weights_with_stride(1).expect("stride 1 always fits")
    }

    /// Trapezoid weights using every `stride`-th point, zero elsewhere; `None`
    /// when the stride does not divide every axis.
    fn weights_with_stride(&self, stride: usize) -> Option<Vec<f64>> {
        if self.n.iter().any(|&n| (n - 1) % stride != 0 || (n - 1) / stride < 1) {
            return None;
        }
        let w = (0..self.n_points())
            .map(|j| {
                self.multi_index(j)
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        let last = self.n[k] - 1;
                        let h = self.spacing(k) * stride as f64;
                        if i % stride != 0 {
                            0.0
                        } else if i == 0 || i == last {
                            0.5 * h
                        } else {
                            h
                        }
                    })
                    .product()
            })
            .collect();
        Some(w)
    }

    fn coarse_weights(&self) -> Option<Vec<f64>> {
        self.weights_with_stride(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    Regression,
    FiniteDifference,
    Supplied,
}

/// `u` and `σ*∇u` on `nodes × lattice`, node-major. Nodes before the start
/// index hold NaN.
#[derive(Debug, Clone)]
pub struct RandomField {
    grid: TimeGrid,
    space: SpatialGrid,
    start_index: usize,
    k: usize,
    u: Vec<f64>,
    grad: Option<Vec<f64>>,
    gradient_source: GradientSource,
    db: Vec<f64>,
    b_dim: usize,
    pub seed: u64,
    pub b_index: u64,
    pub warnings: Vec<String>,
}

impl RandomField {
    /// A field from explicit values. `u` is `n_nodes × n_points`, `grad`
    /// `n_nodes × n_points × k`, `db` the `N × m` backward increments.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        grid: TimeGrid,
        space: SpatialGrid,
        k: usize,
        u: Vec<f64>,
        grad: Option<Vec<f64>>,
        db: Vec<f64>,
        b_dim: usize,
    ) -> Result<Self> {
        let np = space.n_points();
        let nn = grid.n_nodes();
        if u.len() != nn * np
            || grad.as_ref().is_some_and(|g| g.len() != nn * np * k)
            || db.len() != grid.n_steps() * b_dim
        {
            return Err(Error::Shape("random field: array sizes do not match the grids".into()));
        }
        Ok(Self {
            grid,
            space,
            start_index: 0,
            k,
            u,
            grad,
            gradient_source: GradientSource::Supplied,
            db,
            b_dim,
            seed: 0,
            b_index: 0,
            warnings: Vec::new(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn space(&self) -> &SpatialGrid {
        &self.space
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    pub fn z_dim(&self) -> usize {
        self.k
    }

    pub fn b_dim(&self) -> usize {
        self.b_dim
    }

    pub fn gradient_source(&self) -> Option<GradientSource> {
        self.grad.as_ref().map(|_| self.gradient_source)
    }

    pub fn u(&self, node: usize, point: usize) -> f64 {
        self.u[node * self.space.n_points() + point]
    }

    pub fn u_row(&self, node: usize) -> &[f64] {
        let np = self.space.n_points();
        &self.u[node * np..(node + 1) * np]
    }

    pub fn grad(&self, node: usize, point: usize) -> Option<&[f64]> {
        let np = self.space.n_points();
        let k = self.k;
        self.grad
            .as_ref()
            .map(|g| &g[(node * np + point) * k..(node * np + point + 1) * k])
    }

    pub fn db(&self, step: usize, c: usize) -> f64 {
        self.db[step * self.b_dim + c]
    }

    pub fn without_gradient(mut self) -> Self {
        self.grad = None;
        self
    }
}

/// Reads the field from a backward solution: `u(t_i, x)` from the step-`i`
/// regression function, `σ*∇u` from the `Z` regression (or central
/// differences of `u` for piecewise-constant bases).
pub fn field_from_solution(
    sol: &BackwardSolution,
    sde: &SdeCoefficients,
    space: &SpatialGrid,
    noise: &DualBrownianPaths,
) -> Result<RandomField> {
    let grid = sol.grid().clone();
    if !grid.same_as(noise.grid()) || noise.id() != sol.noise_id() {
        return Err(Error::Coupling("field noise differs from the solution's noise".into()));
    }
    if space.dim() != sde.dim() {
        return Err(Error::Shape(format!(
            "spatial grid has dimension {}, state has {}",
            space.dim(),
            sde.dim()
        )));
    }
    let np = space.n_points();
    let nn = grid.n_nodes();
    let k = sol.z_dim();
    let d = space.dim();
    let pts = space.points();
    let start = sol.start_index();
    let mut u = vec![f64::NAN; nn * np];
    let mut outside = 0usize;
    for i in start..nn {
        if let Some(fit) = sol.step_fit(i) {
            outside += pts.iter().filter(|x| !fit.c.map.contains(x)).count();
        }
        for (j, x) in pts.iter().enumerate() {
            u[i * np + j] = sol.value_at(i, x);
        }
    }
    let mut warnings = Vec::new();
    if outside > 0 {
        warnings.push(format!(
            "{outside} lattice evaluations fall outside the regression domain and are extrapolated"
        ));
    }
    let piecewise = matches!(sol.basis().family, BasisFamily::PiecewiseConstant { .. });
    let mut grad = vec![f64::NAN; nn * np * k];
    let source = if piecewise {
        let mut sigma = vec![0.0; d * k];
        for i in start..nn {
            let t = grid.node(i);
            for (j, x) in pts.iter().enumerate() {
                let du = lattice_gradient(space, &u[i * np..(i + 1) * np], j);
                sde.diffusion(t, x, &mut sigma);
                for l in 0..k {
                    grad[(i * np + j) * k + l] = (0..d).map(|a| sigma[a * k + l] * du[a]).sum();
                }
            }
        }
        GradientSource::FiniteDifference
    } else {
        for i in start..nn {
            for (j, x) in pts.iter().enumerate() {
                let z = sol.z_at(i, x);
                grad[(i * np + j) * k..(i * np + j + 1) * k].copy_from_slice(&z);
            }
        }
        GradientSource::Regression
    };
    let m = noise.b_dim();
    let db = (0..grid.n_steps())
        .flat_map(|s| (0..m).map(move |c| (s, c)))
        .map(|(s, c)| noise.db(s, c))
        .collect();
    Ok(RandomField {
        grid,
        space: space.clone(),
        start_index: start,
        k,
        u,
        grad: Some(grad),
        gradient_source: source,
        db,
        b_dim: m,
        seed: noise.seed(),
        b_index: noise.b_index(),
        warnings,
    })
}

// Central differences on the lattice, one-sided at the edges.
fn lattice_gradient(space: &SpatialGrid, row: &[f64], j: usize) -> Vec<f64> {
    let idx = space.multi_index(j);
    (0..space.dim())
        .map(|k| {
            let h = space.spacing(k);
            let mut lo = idx.clone();
            let mut hi = idx.clone();
            let last = space.n[k] - 1;
            if idx[k] > 0 {
                lo[k] -= 1;
            }
            if idx[k] < last {
                hi[k] += 1;
            }
            let span = (hi[k] - lo[k]) as f64 * h;
            (row[space.flat(&hi)] - row[space.flat(&lo)]) / span
        })
        .collect()
}

/// Simulates forward paths started uniformly on the spatial box, solves once
/// on the `B` realization `b_index`, and reads the field.
#[allow(clippy::too_many_arguments)]
pub fn build_field(
    sde: &SdeCoefficients,
    problem: &BdsdeProblem,
    cfg: &LsmcConfig,
    space: &SpatialGrid,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    b_index: u64,
    b_dim: usize,
) -> Result<RandomField> {
    let noise = sample_paths_with_b(grid, sde.noise_dim(), b_dim, n_paths, seed, b_index)?;
    let init = InitialLaw::UniformBox {
        lo: space.lo.clone(),
        hi: space.hi.clone(),
    };
    let fwd = euler_maruyama(sde, grid.t_start(), &init, &noise)?;
    let sol = solve_lsmc(&fwd, problem, &noise, cfg)?;
    field_from_solution(&sol, sde, space, &noise)
}

#[derive(Debug, Clone, Serialize)]
pub struct NormReport {
    pub kappa: f64,
    pub t_cut: f64,
    pub value: f64,
    /// Same quadrature with doubled spacing in time and (when it fits) space.
    pub coarse_value: f64,
    pub refinement_delta: f64,
}

/// `∫∫ (|u|² + |σ*∇u|²) ρ^{-1}` over `[t_0, T - δ] × box`, trapezoid in `x`,
/// left rectangles in `t`.
pub fn weighted_norm(field: &RandomField, rho: &WeightFunction, delta: f64) -> Result<NormReport> {
    let space = &field.space;
    if space.whole_space && !rho.integrable(space.dim()) {
        return Err(Error::NonIntegrableWeight(format!(
            "ρ^{{-1}} = (1 + |x|)^{{-{}}} is not integrable on R^{}",
            rho.kappa,
            space.dim()
        )));
    }
    if field.grad.is_none() {
        return Err(Error::Capability("weighted norm needs the gradient field".into()));
    }
    let grid = &field.grid;
    let t_cut = grid.t_end() - delta;
    let end = grid.floor_index(t_cut);
    let np = space.n_points();
    let pts = space.points();
    let inv_rho: Vec<f64> = pts.iter().map(|x| 1.0 / rho.rho(x)).collect();
    let integrand = |i: usize, j: usize| {
        let u = field.u(i, j);
        let g: f64 = field.grad(i, j).map_or(0.0, |g| g.iter().map(|v| v * v).sum());
        (u * u + g) * inv_rho[j]
    };
    let quad = |w: &[f64], stride: usize| {
        let mut total = 0.0;
        let mut i = field.start_index;
        while i + stride <= end {
            let row: f64 = (0..np).filter(|&j| w[j] != 0.0).map(|j| w[j] * integrand(i, j)).sum();
            total += stride as f64 * grid.dt() * row;
            i += stride;
        }
        total
    };
    let value = quad(&space.weights(), 1);
    let coarse_w = space.coarse_weights().unwrap_or_else(|| space.weights());
    let coarse_value = if end - field.start_index >= 2 { quad(&coarse_w, 2) } else { quad(&coarse_w, 1) };
    Ok(NormReport {
        kappa: rho.kappa,
        t_cut,
        value,
        coarse_value,
        refinement_delta: (value - coarse_value).abs(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakFormTerm {
    pub name: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakFormResidual {
    pub r: f64,
    pub t: f64,
    /// Seven terms; the first five sum to the left side, the last two to
    /// the right side.
    pub terms: Vec<WeakFormTerm>,
    pub lhs: f64,
    pub rhs: f64,
    pub signed: f64,
    pub residual: f64,
}

impl WeakFormResidual {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

pub const WEAK_FORM_TERMS: [&str; 7] = [
    "time_derivative",
    "lower_boundary",
    "upper_boundary",
    "diffusion",
    "transport",
    "driver",
    "backward_noise",
];

/// Assembles
/// `∫∫ u ∂_sΨ + ∫ u(r)Ψ(r) - ∫ u(t)Ψ(t) + ½∫∫ (σ*∇u)(σ*∇Ψ)
///  + ∫∫ u div((b - Ã)Ψ) = ∫∫ Ψ f + ∫∫ Ψ g ←dB`
/// over `[t_r, t_t]` (node indices), left rectangles in time and the right
/// endpoint for the backward integral.
pub fn weak_form_residual(
    field: &RandomField,
    psi: &SpaceTimeTest,
    sde: &SdeCoefficients,
    problem: &BdsdeProblem,
    r_node: usize,
    t_node: usize,
) -> Result<WeakFormResidual> {
    let grid = &field.grid;
    if r_node < field.start_index || r_node > t_node || t_node > grid.n_steps() {
        return Err(Error::Config(format!(
            "weak form interval [{r_node}, {t_node}] is not inside the solved nodes"
        )));
    }
    if field.grad.is_none() {
        return Err(Error::Capability("weak form needs the gradient field".into()));
    }
    let space = &field.space;
    let (d, k, m) = (space.dim(), field.k, field.b_dim);
    if psi.space.dim() != d || problem.g.m != m {
        return Err(Error::Shape("test function or g does not match the field dimensions".into()));
    }
    let pts = space.points();
    let w = space.weights();
    let dt = grid.dt();

    // Time-independent spatial pieces of Ψ.
    let theta: Vec<f64> = pts.iter().map(|x| psi.space.value(x)).collect();
    let grad_theta: Vec<Vec<f64>> = pts
        .iter()
        .map(|x| {
            let mut g = vec![0.0; d];
            if !psi.space.gradient(x, &mut g) {
                fd_gradient(psi.space.as_ref(), x, fd_step(x), &mut g);
            }
            g
        })
        .collect();

    let mut terms = [0.0; 7];
    let mut sigma = vec![0.0; d * k];
    let mut bvec = vec![0.0; d];
    let mut gout = vec![0.0; m];
    for (j, x) in pts.iter().enumerate() {
        if theta[j] == 0.0 && grad_theta[j].iter().all(|v| *v == 0.0) {
            continue;
        }
        let wj = w[j];
        terms[1] += wj * field.u(r_node, j) * psi.time.value(grid.node(r_node)) * theta[j];
        terms[2] -= wj * field.u(t_node, j) * psi.time.value(grid.node(t_node)) * theta[j];
        for i in r_node..t_node {
            let s = grid.node(i);
            let a = psi.time.value(s);
            let u = field.u(i, j);
            let gu = field.grad(i, j).expect("checked above");
            terms[0] += wj * dt * u * psi.time.derivative(s) * theta[j];

            sde.diffusion(s, x, &mut sigma);
            let sg_psi: Vec<f64> = (0..k)
                .map(|l| (0..d).map(|q| sigma[q * k + l] * grad_theta[j][q]).sum::<f64>() * a)
                .collect();
            terms[3] += wj * dt * 0.5 * gu.iter().zip(&sg_psi).map(|(p, q)| p * q).sum::<f64>();

            sde.drift(s, x, &mut bvec);
            let at = sde.a_tilde(s, x);
            let div = transport_divergence(sde, s, x);
            let adv: f64 = (0..d).map(|q| (bvec[q] - at[q]) * grad_theta[j][q]).sum();
            terms[4] += wj * dt * u * a * (theta[j] * div + adv);

            terms[5] += wj * dt * a * theta[j] * problem.f.eval(s, x, u, gu);

            // Right endpoint for ←dB.
            let s1 = grid.node(i + 1);
            let u1 = field.u(i + 1, j);
            let gu1 = field.grad(i + 1, j).expect("checked above");
            problem.g.eval(s1, x, u1, gu1, &mut gout);
            let gdb: f64 = (0..m).map(|c| gout[c] * field.db(i, c)).sum();
            terms[6] += wj * psi.time.value(s1) * theta[j] * gdb;
        }
    }
    let lhs = terms[..5].iter().sum::<f64>();
    let rhs = terms[5] + terms[6];
    Ok(WeakFormResidual {
        r: grid.node(r_node),
        t: grid.node(t_node),
        terms: WEAK_FORM_TERMS
            .iter()
            .zip(terms)
            .map(|(&name, value)| WeakFormTerm { name, value })
            .collect(),
        lhs,
        rhs,
        signed: lhs - rhs,
        residual: (lhs - rhs).abs(),
    })
}

// div(b - Ã) by central differences; zero for constant coefficients.
fn transport_divergence(sde: &SdeCoefficients, t: f64, x: &[f64]) -> f64 {
    if sde.constant_coefficients {
        return 0.0;
    }
    let d = x.len();
    let h = fd_step(x).sqrt();
    let mut p = x.to_vec();
    let mut b = vec![0.0; d];
    let mut div = 0.0;
    for q in 0..d {
        p[q] = x[q] + h;
        sde.drift(t, &p, &mut b);
        let up = b[q] - sde.a_tilde(t, &p)[q];
        p[q] = x[q] - h;
        sde.drift(t, &p, &mut b);
        let down = b[q] - sde.a_tilde(t, &p)[q];
        p[q] = x[q];
        div += (up - down) / (2.0 * h);
    }
    div
}

#[derive(Debug, Clone, Serialize)]
pub struct TracePoint {
    pub t: f64,
    pub node: usize,
    /// `∫ u(t, x) φ(x) dx`, averaged over the supplied fields.
    pub value: f64,
    /// Standard error across fields (0 for a single field).
    pub se: f64,
    /// Difference to the same quadrature with doubled spacing.
    pub quadrature_delta: f64,
    /// `(q(T - t))^{-1/q} ∫ φ` when `q` is given.
    pub envelope: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceCurve {
    pub integral_phi: f64,
    /// `∫ h φ` for a finite trace request.
    pub target: Option<f64>,
    pub target_quadrature_delta: Option<f64>,
    pub points: Vec<TracePoint>,
}

/// True when `φ` may be non-zero on the singular set of `h`.
pub fn support_touches_singular_set(phi: &dyn TestFunction, terminal: &TerminalCondition, space: &SpatialGrid) -> bool {
    if let (Some((c, r)), true) = (phi.support_ball(), terminal.has_distance()) {
        if let Some(dist) = terminal.dist_to_singular_set(&c) {
            return dist <= r;
        }
    }
    space
        .points()
        .iter()
        .any(|x| phi.value(x) != 0.0 && (terminal.in_singular_set(x) || terminal.raw(x).is_infinite()))
}

/// `t ↦ ∫ u(t, ·) φ` over the solved nodes, averaged over the fields (one
/// per `B` realization or ladder run). `finite` requests the target `∫ h φ`
/// and requires the support of `φ` to avoid `S`.
pub fn terminal_trace(
    fields: &[RandomField],
    phi: &dyn TestFunction,
    terminal: &TerminalCondition,
    q: Option<f64>,
    finite: bool,
) -> Result<TraceCurve> {
    let first = fields
        .first()
        .ok_or_else(|| Error::Config("terminal trace needs at least one field".into()))?;
    let space = &first.space;
    if fields.iter().any(|f| f.space != *space || !f.grid.same_as(&first.grid)) {
        return Err(Error::Shape("trace fields must share the space-time grid".into()));
    }
    if finite && support_touches_singular_set(phi, terminal, space) {
        return Err(Error::Mode(
            "finite terminal trace requested but the test function's support touches the singular set".into(),
        ));
    }
    let pts = space.points();
    let phi_v: Vec<f64> = pts.iter().map(|x| phi.value(x)).collect();
    let w = space.weights();
    let wc = space.coarse_weights();
    let integrate = |w: &[f64], vals: &dyn Fn(usize) -> f64| -> f64 {
        (0..pts.len())
            .filter(|&j| phi_v[j] != 0.0 && w[j] != 0.0)
            .map(|j| w[j] * vals(j) * phi_v[j])
            .sum()
    };
    let integral_phi = integrate(&w, &|_| 1.0);
    let (target, target_quadrature_delta) = if finite {
        let h = |j: usize| terminal.raw(&pts[j]);
        let fine = integrate(&w, &h);
        (Some(fine), wc.as_ref().map(|c| (fine - integrate(c, &h)).abs()))
    } else {
        (None, None)
    };
    let grid = &first.grid;
    let start = fields.iter().map(|f| f.start_index).max().unwrap_or(0);
    let mut points = Vec::new();
    for i in start..=grid.n_steps() {
        let per_field: Vec<f64> = fields.iter().map(|f| integrate(&w, &|j| f.u(i, j))).collect();
        let value = stats::mean(&per_field);
        let se = if fields.len() > 1 { stats::std_err(&per_field) } else { 0.0 };
        let quadrature_delta = match &wc {
            Some(c) => {
                let coarse: Vec<f64> = fields.iter().map(|f| integrate(c, &|j| f.u(i, j))).collect();
                (value - stats::mean(&coarse)).abs()
            }
            None => 0.0,
        };
        let tau = grid.t_end() - grid.node(i);
        let envelope = q.filter(|_| i < grid.n_steps()).map(|q| oracles::apriori_bound(q, tau) * integral_phi);
        points.push(TracePoint {
            t: grid.node(i),
            node: i,
            value,
            se,
            quadrature_delta,
            envelope,
        });
    }
    Ok(TraceCurve {
        integral_phi,
        target,
        target_quadrature_delta,
        points,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityGap {
    pub r: f64,
    pub t: f64,
    /// `E ∫ Z_r · ∇θ(X_r) σ dr`
    pub lhs: Estimate,
    /// `E ∫ Y_r ψ(r, X_r) dr`
    pub rhs: Estimate,
    /// `|lhs - rhs|` from the paired per-path differences.
    pub gap: f64,
    pub gap_se: f64,
    pub passed: bool,
}

/// Gaussian integration-by-parts check for constant `b`, `σ` and a point
/// start `x_0`: `X_s ~ N(x_0 + b s, σσ* s)`, so
/// `ψ(s, y) = Σ_i (∇θσ)_i σ^i·Σ(s)^{-1}(y - x_0 - b s) - Tr(D²θ σσ*)`.
/// Left rectangles over `[t_r, t_t)`; `t_r` must lie after the start.
pub fn malliavin_identity_check(
    sol: &BackwardSolution,
    fwd: &ForwardPaths,
    sde: &SdeCoefficients,
    theta: &dyn TestFunction,
    r_node: usize,
    t_node: usize,
) -> Result<IdentityGap> {
    if !sde.constant_coefficients {
        return Err(Error::Mode(
            "the identity check supports constant coefficients only (Gaussian density)".into(),
        ));
    }
    if !(sde.elliptic_lambda > 0.0) {
        return Err(Error::Mode("the identity check needs an elliptic diffusion".into()));
    }
    let grid = sol.grid();
    let start = fwd.start_index();
    if r_node <= start || r_node > t_node || t_node > grid.n_steps() {
        return Err(Error::Config(format!(
            "identity interval [{r_node}, {t_node}] must start after node {start}"
        )));
    }
    let n = fwd.n_paths();
    let (d, k) = (sde.dim(), sde.noise_dim());
    let x0 = fwd.x(0, start).to_vec();
    if (1..n).any(|p| fwd.x(p, start) != x0.as_slice()) {
        return Err(Error::Mode("the identity check needs a point start".into()));
    }
    let mut sigma = vec![0.0; d * k];
    sde.diffusion(0.0, &x0, &mut sigma);
    let mut b = vec![0.0; d];
    sde.drift(0.0, &x0, &mut b);
    let a = sde.sigma_sigma_t(0.0, &x0);
    let a_inv = DMatrix::from_row_slice(d, d, &a)
        .try_inverse()
        .ok_or_else(|| Error::Mode("σσ* is singular".into()))?;

    let dt = grid.dt();
    let t0 = fwd.start_time();
    let mut lhs = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut g = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    for i in r_node..t_node {
        let s = grid.node(i) - t0;
        for p in 0..n {
            let x = fwd.x(p, i);
            if !theta.gradient(x, &mut g) {
                fd_gradient(theta, x, fd_step(x), &mut g);
            }
            if !theta.hessian(x, &mut hess) {
                fd_hessian(theta, x, fd_step(x).sqrt(), &mut hess);
            }
            // ∇θσ
            let gs: Vec<f64> = (0..k).map(|l| (0..d).map(|q| g[q] * sigma[q * k + l]).sum()).collect();
            let z = sol.z(i, p);
            lhs[p] += dt * z.iter().zip(&gs).map(|(a, b)| a * b).sum::<f64>();
            // Σ(s)^{-1}(y - m) = (σσ*)^{-1}(y - m) / s
            let dev: Vec<f64> = (0..d).map(|q| x[q] - x0[q] - b[q] * s).collect();
            let sol_dev: Vec<f64> = (0..d).map(|r| (0..d).map(|c| a_inv[(r, c)] * dev[c]).sum::<f64>() / s).collect();
            let mut psi = 0.0;
            for l in 0..k {
                let sl: f64 = (0..d).map(|q| sigma[q * k + l] * sol_dev[q]).sum();
                psi += gs[l] * sl;
            }
            let trace: f64 = (0..d).map(|r| (0..d).map(|c| hess[r * d + c] * a[c * d + r]).sum::<f64>()).sum();
            psi -= trace;
            rhs[p] += dt * sol.y(i, p) * psi;
        }
    }
    let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let de = Estimate::from_samples(&diff);
    let gap = de.mean.abs();
    Ok(IdentityGap {
        r: grid.node(r_node),
        t: grid.node(t_node),
        lhs: Estimate::from_samples(&lhs),
        rhs: Estimate::from_samples(&rhs),
        gap,
        gap_se: de.se,
        passed: gap <= 3.0 * de.se + 1e-12,
    })
}

#[cfg(test)]
mod tests;
