//! Backward least-squares Monte-Carlo for
//! `Y_t = ξ + ∫_t^T f(r, X_r, Y_r, Z_r) dr + ∫_t^T g(r, X_r, Y_r, Z_r) ←dB_r - ∫_t^T Z_r dW_r`.
//!
//! One step `i = N-1, ..., 0` with the shared B path fixed:
//!
//! 1. `Z_i` ← projection of `(Y_{i+1} - Ŷ_{i+1}) ΔW_i / Δt` on the basis of
//!    `X_i`, where `Ŷ_{i+1}` is the projection of `Y_{i+1}` itself;
//! 2. `Q_i = Y_{i+1} + g(t_{i+1}, X_{i+1}, Y_{i+1}, Z_{i+1}) ΔB_i`;
//! 3. `C_i` ← projection of `Q_i` (optionally minus `Z_i ΔW_i`, which has
//!    zero conditional mean);
//! 4. `Y_i` solves `y - Δt f(t_i, X_i, y, Z_i) = C_i`.

mod compare;
mod picard;
mod shift;

pub use compare::{compare_coupled, ComparisonReport, NodeViolation, Tolerance};
pub use picard::{picard_solve, ContractionTrace, PicardConfig};
pub use shift::{solve_shift_reduction, GPath};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drivers::{GeneratorKind, GeneratorSpec, NoiseCoefficientSpec, TerminalCondition, TerminalKind};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::{DualBrownianPaths, NoiseId};
use crate::oracles::power_flow;
use crate::regression::{Design, RegressionBasis, Regressor};
use crate::sde::ForwardPaths;

/// Generator, noise coefficient and terminal condition of one equation.
#[derive(Debug, Clone)]
pub struct BdsdeProblem {
    pub f: GeneratorSpec,
    pub g: NoiseCoefficientSpec,
    pub terminal: TerminalCondition,
}

/// Treatment of the drift over one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftStep {
    /// Root of `y - Δt f(y) = c`.
    ImplicitEuler,
    /// Exact flow of `y' = y|y|^q` over the step; power-law generators only.
    ExactPowerFlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsmcConfig {
    pub basis: RegressionBasis,
    /// Defaults to the exact flow for power-law generators and to the
    /// implicit step otherwise.
    pub drift_step: Option<DriftStep>,
    pub control_variate: bool,
    pub root_tol: f64,
}

impl LsmcConfig {
    pub fn new(basis: RegressionBasis) -> Self {
        Self {
            basis,
            drift_step: None,
            control_variate: true,
            root_tol: 1e-12,
        }
    }

    pub fn with_drift_step(mut self, step: DriftStep) -> Self {
        self.drift_step = Some(step);
        self
    }

    pub fn with_control_variate(mut self, on: bool) -> Self {
        self.control_variate = on;
        self
    }

    fn resolve_drift(&self, f: &GeneratorSpec) -> Result<DriftStep> {
        match (self.drift_step, f.kind) {
            (Some(DriftStep::ExactPowerFlow), GeneratorKind::PowerLaw { .. }) => {
                Ok(DriftStep::ExactPowerFlow)
            }
            (Some(DriftStep::ExactPowerFlow), _) => Err(Error::Config(
                "the exact power flow needs a power-law generator".into(),
            )),
            (Some(s), _) => Ok(s),
            (None, GeneratorKind::PowerLaw { .. }) => Ok(DriftStep::ExactPowerFlow),
            (None, _) => Ok(DriftStep::ImplicitEuler),
        }
    }
}

/// Regression functions of one step, kept so the solution can be read at
/// states that were not simulated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepFit {
    pub c: Regressor,
    pub z: Vec<Regressor>,
    pub shift: f64,
}

/// Sampled `(Y, Z)` on the grid for one B path.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    grid: TimeGrid,
    n_paths: usize,
    z_dim: usize,
    start_index: usize,
    // node-major
    y: Vec<f64>,
    z: Vec<f64>,
    residuals: Vec<f64>,
    z_residuals: Vec<f64>,
    conditions: Vec<f64>,
    fits: Vec<Option<StepFit>>,
    basis: RegressionBasis,
    noise: NoiseId,
    drift: DriftStep,
    f: GeneratorSpec,
    terminal: TerminalCondition,
    root_tol: f64,
}

impl BackwardSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    /// First node at which the solution is defined.
    pub fn start_index(&self) -> usize {
        self.start_index
    }

    pub fn noise_id(&self) -> NoiseId {
        self.noise
    }

    pub fn basis(&self) -> &RegressionBasis {
        &self.basis
    }

    pub fn drift_step(&self) -> DriftStep {
        self.drift
    }

    pub fn root_tol(&self) -> f64 {
        self.root_tol
    }

    pub fn terminal(&self) -> &TerminalCondition {
        &self.terminal
    }

    pub fn y(&self, node: usize, path: usize) -> f64 {
        self.y[node * self.n_paths + path]
    }

    /// `Y_{t_i}` over all paths.
    pub fn y_column(&self, node: usize) -> &[f64] {
        &self.y[node * self.n_paths..(node + 1) * self.n_paths]
    }

    /// `Z_{t_i}` of one path, `i < N`.
    pub fn z(&self, node: usize, path: usize) -> &[f64] {
        let s = (node * self.n_paths + path) * self.z_dim;
        &self.z[s..s + self.z_dim]
    }

    /// `|Z_{t_i}|²` over all paths.
    pub fn z_norm2_column(&self, node: usize) -> Vec<f64> {
        (0..self.n_paths)
            .map(|p| self.z(node, p).iter().map(|v| v * v).sum())
            .collect()
    }

    /// RMS residual of the `C` regression at each step `0..N`.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn z_residuals(&self) -> &[f64] {
        &self.z_residuals
    }

    pub fn condition_estimates(&self) -> &[f64] {
        &self.conditions
    }

    /// Largest per-step residual over the solved steps.
    pub fn max_residual(&self) -> f64 {
        self.residuals[self.start_index..]
            .iter()
            .fold(0.0, |m, v| m.max(*v))
    }

    pub fn step_fit(&self, step: usize) -> Option<&StepFit> {
        self.fits.get(step).and_then(|f| f.as_ref())
    }

    /// The solution as a function of the state at node `i`.
    pub fn value_at(&self, node: usize, x: &[f64]) -> f64 {
        let n = self.grid.n_steps();
        if node == n {
            return self.terminal.eval(x);
        }
        let Some(fit) = self.step_fit(node) else {
            return f64::NAN;
        };
        let z: Vec<f64> = fit.z.iter().map(|r| r.value(x)).collect();
        let c = fit.c.value(x);
        drift_solve(
            &self.f,
            self.drift,
            self.grid.node(node),
            self.grid.dt(),
            x,
            &z,
            c - fit.shift,
            self.root_tol,
        )
        .unwrap_or(f64::NAN)
    }

    /// The `Z` regression at node `i` (node `N` reuses step `N-1`).
    pub fn z_at(&self, node: usize, x: &[f64]) -> Vec<f64> {
        let i = node.min(self.grid.n_steps() - 1);
        match self.step_fit(i) {
            Some(fit) => fit.z.iter().map(|r| r.value(x)).collect(),
            None => vec![f64::NAN; self.z_dim],
        }
    }

    /// Per-node mean and standard deviation of `Y`, mean `|Z|`, residual.
    pub fn node_summary(&self) -> Vec<NodeSummary> {
        let n = self.grid.n_steps();
        (self.start_index..=n)
            .map(|i| {
                let col = self.y_column(i);
                let (mean_abs_z, residual) = if i < n {
                    let za: Vec<f64> = self.z_norm2_column(i).iter().map(|v| v.sqrt()).collect();
                    (crate::stats::mean(&za), self.residuals[i])
                } else {
                    (0.0, 0.0)
                };
                NodeSummary {
                    t: self.grid.node(i),
                    mean_y: crate::stats::mean(col),
                    std_y: crate::stats::std_dev(col),
                    mean_abs_z,
                    residual,
                }
            })
            .collect()
    }

    pub(crate) fn y_raw(&self) -> &[f64] {
        &self.y
    }

    pub(crate) fn z_raw(&self) -> &[f64] {
        &self.z
    }

    /// Rows permuted: path `j` of the result is path `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let n = self.n_paths;
        let k = self.z_dim;
        let mut out = self.clone();
        for node in 0..self.grid.n_nodes() {
            for (j, &p) in order.iter().enumerate() {
                out.y[node * n + j] = self.y[node * n + p];
            }
        }
        for node in 0..self.grid.n_steps() {
            for (j, &p) in order.iter().enumerate() {
                let (dst, src) = ((node * n + j) * k, (node * n + p) * k);
                out.z[dst..dst + k].copy_from_slice(&self.z[src..src + k]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeSummary {
    pub t: f64,
    pub mean_y: f64,
    pub std_y: f64,
    pub mean_abs_z: f64,
    pub residual: f64,
}

/// Solves `y - Δt f(t, x, y, z) = c` (or takes the exact power flow).
#[allow(clippy::too_many_arguments)]
pub fn drift_solve(
    f: &GeneratorSpec,
    step: DriftStep,
    t: f64,
    dt: f64,
    x: &[f64],
    z: &[f64],
    c: f64,
    tol: f64,
) -> Result<f64> {
    if let (DriftStep::ExactPowerFlow, Some(q)) = (step, f.power_q()) {
        return Ok(power_flow(c, q, dt));
    }
    if !c.is_finite() {
        return Err(Error::RootSolve(format!("non-finite right-hand side {c} at t={t}")));
    }
    let res = |y: f64| y - dt * f.eval(t, x, y, z) - c;
    let w = c.abs().max(1.0);
    let (mut lo, mut hi) = if f.power_q().is_some() {
        (-c.abs(), c.abs())
    } else {
        (c - w, c + w)
    };
    let mut rlo = res(lo);
    let mut rhi = res(hi);
    let mut widen = w;
    let mut tries = 0;
    while rlo > 0.0 || rhi < 0.0 {
        if f.power_q().is_some() && tries == 0 {
            // Cannot happen: F(-|c|) <= 0 <= F(|c|) for f(y) = -y|y|^q.
            debug_assert!(false, "power-law bracket failed for c={c}");
        }
        tries += 1;
        if tries > 200 || !(rlo.is_finite() && rhi.is_finite()) {
            return Err(Error::RootSolve(format!(
                "could not bracket the implicit step at t={t}, c={c}, x={x:?}"
            )));
        }
        widen *= 2.0;
        if rlo > 0.0 {
            lo -= widen;
            rlo = res(lo);
        }
        if rhi < 0.0 {
            hi += widen;
            rhi = res(hi);
        }
    }
    if rlo == 0.0 {
        return Ok(lo);
    }
    if rhi == 0.0 {
        return Ok(hi);
    }
    let mut y = c.clamp(lo, hi);
    for _ in 0..200 {
        let r = res(y);
        if r == 0.0 {
            return Ok(y);
        }
        if r < 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        let d = 1.0 - dt * f.dfdy(t, x, y, z);
        let newton = y - r / d;
        let next = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - y).abs() <= tol || hi - lo <= tol {
            return Ok(next);
        }
        y = next;
    }
    Err(Error::RootSolve(format!(
        "implicit step did not converge at t={t}, c={c}"
    )))
}

/// Arguments of `g` and of the `z` slot of `f` in a sweep.
pub(crate) enum Frozen<'a> {
    /// The values computed in the current sweep.
    Current,
    /// A previous sweep's `(Y, Z)`, node-major.
    Previous { y: &'a [f64], z: &'a [f64] },
}

pub(crate) struct Sweep<'a> {
    pub frozen: Frozen<'a>,
    /// `∫_0^{t_i} g ←dB` per node; when present the recursion runs on
    /// `U = Y + shift` with no backward integral.
    pub shift: Option<&'a [f64]>,
}

fn check_inputs(
    fwd: &ForwardPaths,
    problem: &BdsdeProblem,
    noise: &DualBrownianPaths,
) -> Result<()> {
    if problem.terminal.kind != TerminalKind::Bounded {
        return Err(Error::Mode(
            "the direct solver needs a bounded terminal condition; truncate it or use the ladder"
                .into(),
        ));
    }
    if fwd.n_paths() != noise.n_paths() || fwd.n_nodes() != noise.grid().n_nodes() {
        return Err(Error::Shape(format!(
            "forward paths ({} x {}) do not match the noise ({} x {})",
            fwd.n_paths(),
            fwd.n_nodes(),
            noise.n_paths(),
            noise.grid().n_nodes()
        )));
    }
    if problem.g.m != noise.b_dim() {
        return Err(Error::Shape(format!(
            "g has {} components, B has {}",
            problem.g.m,
            noise.b_dim()
        )));
    }
    if problem.f.mu > 0.0 && problem.f.mu * noise.grid().dt() >= 1.0 {
        return Err(Error::Config(format!(
            "implicit step needs dt * mu < 1, got dt={} and mu={}",
            noise.grid().dt(),
            problem.f.mu
        )));
    }
    Ok(())
}

/// Runs the backward recursion on coupled forward paths and noise.
pub fn solve_lsmc(
    fwd: &ForwardPaths,
    problem: &BdsdeProblem,
    noise: &DualBrownianPaths,
    cfg: &LsmcConfig,
) -> Result<BackwardSolution> {
    backward_sweep(
        fwd,
        problem,
        noise,
        cfg,
        Sweep {
            frozen: Frozen::Current,
            shift: None,
        },
    )
}

pub(crate) fn backward_sweep(
    fwd: &ForwardPaths,
    problem: &BdsdeProblem,
    noise: &DualBrownianPaths,
    cfg: &LsmcConfig,
    sweep: Sweep<'_>,
) -> Result<BackwardSolution> {
    check_inputs(fwd, problem, noise)?;
    let drift = cfg.resolve_drift(&problem.f)?;
    let grid = noise.grid().clone();
    let n_steps = grid.n_steps();
    let n = fwd.n_paths();
    let d = fwd.dim();
    let k = noise.w_dim();
    let m = problem.g.m;
    let dt = grid.dt();
    let start = fwd.start_index();
    let shift_at = |i: usize| sweep.shift.map_or(0.0, |s| s[i]);

    let mut y = vec![f64::NAN; (n_steps + 1) * n];
    let mut z = vec![f64::NAN; n_steps * n * k];
    let mut residuals = vec![f64::NAN; n_steps];
    let mut z_residuals = vec![f64::NAN; n_steps];
    let mut conditions = vec![f64::NAN; n_steps];
    let mut fits: Vec<Option<StepFit>> = vec![None; n_steps];

    y[n_steps * n..]
        .par_iter_mut()
        .enumerate()
        .for_each(|(p, v)| *v = problem.terminal.eval(fwd.x(p, n_steps)));
    if let Some(p) = y[n_steps * n..].iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalBlowup {
            step: n_steps,
            detail: format!("terminal value at path {p} is not finite"),
        });
    }

    let mut xs = vec![0.0; n * d];
    for i in (start..n_steps).rev() {
        for p in 0..n {
            xs[p * d..(p + 1) * d].copy_from_slice(fwd.x(p, i));
        }
        let design = Design::new(&cfg.basis, d, &xs, i)?;
        conditions[i] = design.condition_estimate();
        let s_next = shift_at(i + 1);
        let s_here = shift_at(i);
        let u_next: Vec<f64> = y[(i + 1) * n..(i + 2) * n].iter().map(|v| v + s_next).collect();

        // (1) Z
        let centre = design.predict(&design.fit(&u_next)?.coef);
        let mut z_fits = Vec::with_capacity(k);
        let mut z_res: f64 = 0.0;
        for c in 0..k {
            let target: Vec<f64> = (0..n)
                .map(|p| (u_next[p] - centre[p]) * noise.dw(p, i, c) / dt)
                .collect();
            let fit = design.fit(&target)?;
            z_res = z_res.max(fit.residual_rms);
            let pred = design.predict(&fit.coef);
            for p in 0..n {
                z[(i * n + p) * k + c] = pred[p];
            }
            z_fits.push(design.regressor(&fit));
        }
        z_residuals[i] = z_res;

        // (2) Q, with g at the right end point.
        let t_next = grid.node(i + 1);
        let (gy, gz): (&[f64], &[f64]) = match sweep.frozen {
            Frozen::Current => (
                &y[(i + 1) * n..(i + 2) * n],
                &z[(i + 1).min(n_steps - 1) * n * k..((i + 1).min(n_steps - 1) + 1) * n * k],
            ),
            Frozen::Previous { y: py, z: pz } => {
                let zi = (i + 1).min(n_steps - 1);
                (&py[(i + 1) * n..(i + 2) * n], &pz[zi * n * k..(zi + 1) * n * k])
            }
        };
        let db: Vec<f64> = (0..m).map(|l| noise.db(i, l)).collect();
        let with_g = sweep.shift.is_none();
        let control = cfg.control_variate;
        let zi_slice = &z[i * n * k..(i + 1) * n * k];
        let q: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|p| {
                let mut v = u_next[p];
                if with_g {
                    let mut gv = vec![0.0; m];
                    problem.g.eval(t_next, fwd.x(p, i + 1), gy[p], &gz[p * k..(p + 1) * k], &mut gv);
                    v += gv.iter().zip(&db).map(|(a, b)| a * b).sum::<f64>();
                }
                if control {
                    v -= (0..k).map(|c| zi_slice[p * k + c] * noise.dw(p, i, c)).sum::<f64>();
                }
                v
            })
            .collect();

        // (3) C
        let c_fit = design.fit(&q)?;
        residuals[i] = c_fit.residual_rms;
        let c_pred = design.predict(&c_fit.coef);

        // (4) implicit drift
        let t_i = grid.node(i);
        let fz: &[f64] = match sweep.frozen {
            Frozen::Current => zi_slice,
            Frozen::Previous { z: pz, .. } => &pz[i * n * k..(i + 1) * n * k],
        };
        let yi: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|p| {
                drift_solve(
                    &problem.f,
                    drift,
                    t_i,
                    dt,
                    fwd.x(p, i),
                    &fz[p * k..(p + 1) * k],
                    c_pred[p] - s_here,
                    cfg.root_tol,
                )
            })
            .collect::<Result<_>>()?;
        if let Some(p) = yi.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup {
                step: i,
                detail: format!("Y is {} on path {p}", yi[p]),
            });
        }
        y[i * n..(i + 1) * n].copy_from_slice(&yi);
        fits[i] = Some(StepFit {
            c: design.regressor(&c_fit),
            z: z_fits,
            shift: s_here,
        });
    }

    Ok(BackwardSolution {
        grid,
        n_paths: n,
        z_dim: k,
        start_index: start,
        y,
        z,
        residuals,
        z_residuals,
        conditions,
        fits,
        basis: cfg.basis.clone(),
        noise: noise.id(),
        drift,
        f: problem.f.clone(),
        terminal: problem.terminal.clone(),
        root_tol: cfg.root_tol,
    })
}
