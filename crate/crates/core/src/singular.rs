//! Minimal solutions for singular terminal data `ξ = h(X_T) ∈ [0, +∞]`,
//! generator `f(y) = -y|y|^q`, built from the truncated problems `ξ ∧ n`.

use rayon::prelude::*;
use serde::Serialize;

use crate::drivers::{GeneratorSpec, NoiseCoefficientSpec, TerminalCondition};
use crate::error::{Error, Result};
use crate::noise::DualBrownianPaths;
use crate::oracles;
use crate::sde::{ForwardPaths, SdeCoefficients};
use crate::solver::{compare_coupled, solve_lsmc, BackwardSolution, BdsdeProblem, LsmcConfig, Tolerance};
use crate::stats::{self, Estimate};

/// `n_j = 2^j`, `j = 0..=k`.
pub fn geometric_levels(k: u32) -> Vec<f64> {
    (0..=k).map(|j| 2f64.powi(j as i32)).collect()
}

/// `δ_j = 2^{-j} T / 8`, `j = 0..count`.
pub fn delta_schedule(t_end: f64, count: u32) -> Vec<f64> {
    (0..count).map(|j| t_end / 8.0 * 0.5f64.powi(j as i32)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityDefect {
    pub lower_level: f64,
    pub upper_level: f64,
    pub pairs: usize,
    /// Pairs with `Y^{n_j} > Y^{n_{j+1}} + root tol + 3 residuals`.
    pub violations: usize,
    /// Same with 5 residuals.
    pub violations_wide: usize,
    pub max_excess: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelGap {
    pub lower_level: f64,
    pub upper_level: f64,
    pub delta: f64,
    /// `sup |Y^{n_{j+1}} - Y^{n_j}|` over paths and nodes in `[0, T - δ]`.
    pub sup_gap: f64,
    /// Mean gap at the first node.
    pub gap_at_start: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeBound {
    pub t: f64,
    pub max_y: f64,
    /// `(q(T - t))^{-1/q}`
    pub bound: f64,
    /// `(q(T - t) + n^{-q})^{-1/q}` for a level-`n` solution.
    pub level_bound: Option<f64>,
    pub tol: f64,
    pub excess: f64,
    pub level_excess: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub q: f64,
    pub level: Option<f64>,
    pub nodes: Vec<NodeBound>,
    /// Largest `Y - bound` over paths and nodes.
    pub max_excess: f64,
    /// Largest `Y - level bound`.
    pub max_level_excess: Option<f64>,
    /// Pairs exceeding the tightest available bound by more than `tol`.
    pub hard_violations: usize,
}

/// Node-wise check of `Y ≤ (q(T-t))^{-1/q}` and, for a level-`n` solution,
/// of `Y ≤ (q(T-t) + n^{-q})^{-1/q}`. The tolerance at step `i` is the root
/// tolerance plus three times the regression residual.
pub fn check_apriori_bound(sol: &BackwardSolution, q: f64, level: Option<f64>) -> BoundReport {
    let grid = sol.grid();
    let n_steps = grid.n_steps();
    let mut nodes = Vec::new();
    let mut max_excess = f64::NEG_INFINITY;
    let mut max_level_excess: Option<f64> = None;
    let mut hard = 0;
    for i in sol.start_index()..=n_steps {
        let tau = grid.t_end() - grid.node(i);
        let bound = if i == n_steps { f64::INFINITY } else { oracles::apriori_bound(q, tau) };
        let level_bound = level.map(|n| oracles::xi(q, tau, n));
        let res = if i < n_steps { sol.residuals()[i] } else { 0.0 };
        let tol = sol.root_tol() + 3.0 * res;
        let col = sol.y_column(i);
        let max_y = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tight = level_bound.map_or(bound, |b| b.min(bound));
        hard += col.iter().filter(|&&y| y > tight + tol).count();
        let excess = max_y - bound;
        max_excess = max_excess.max(excess);
        let level_excess = level_bound.map(|b| max_y - b);
        if let Some(e) = level_excess {
            max_level_excess = Some(max_level_excess.map_or(e, |m: f64| m.max(e)));
        }
        nodes.push(NodeBound {
            t: grid.node(i),
            max_y,
            bound,
            level_bound,
            tol,
            excess,
            level_excess,
        });
    }
    BoundReport {
        q,
        level,
        nodes,
        max_excess,
        max_level_excess,
        hard_violations: hard,
    }
}

pub struct LadderResult {
    pub q: f64,
    pub levels: Vec<f64>,
    pub solutions: Vec<BackwardSolution>,
    pub monotonicity: Vec<MonotonicityDefect>,
    pub bounds: Vec<BoundReport>,
    pub gaps: Vec<LevelGap>,
}

impl LadderResult {
    pub fn top(&self) -> &BackwardSolution {
        self.solutions.last().expect("ladder has at least one level")
    }

    pub fn top_level(&self) -> f64 {
        *self.levels.last().expect("ladder has at least one level")
    }

    pub fn hard_bound_violations(&self) -> usize {
        self.bounds.iter().map(|b| b.hard_violations).sum()
    }
}

/// Solves the truncated problems `ξ ∧ n_j` on shared noise, then reports
/// ordering defects between consecutive levels, bound defects, and level
/// gaps on `[0, T - δ]` for every `δ` in `deltas`.
#[allow(clippy::too_many_arguments)]
pub fn solve_singular_ladder(
    fwd: &ForwardPaths,
    q: f64,
    g: &NoiseCoefficientSpec,
    terminal: &TerminalCondition,
    levels: &[f64],
    noise: &DualBrownianPaths,
    cfg: &LsmcConfig,
    deltas: &[f64],
) -> Result<LadderResult> {
    if !g.vanishing_at_zero {
        return Err(Error::Mode(
            "the singular ladder needs g(t, x, y, 0) = 0 (vanishing_at_zero)".into(),
        ));
    }
    if levels.is_empty() || levels.iter().any(|n| !(*n > 0.0)) || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("ladder levels must be positive and strictly increasing".into()));
    }
    let f = GeneratorSpec::power_law(q)?;
    let solutions: Vec<BackwardSolution> = levels
        .par_iter()
        .map(|&n| {
            let problem = BdsdeProblem {
                f: f.clone(),
                g: g.clone(),
                terminal: terminal.truncate(n),
            };
            solve_lsmc(fwd, &problem, noise, cfg)
        })
        .collect::<Result<_>>()?;

    let mut monotonicity = Vec::new();
    let mut gaps = Vec::new();
    let grid = noise.grid();
    for j in 0..levels.len().saturating_sub(1) {
        let (a, b) = (&solutions[j], &solutions[j + 1]);
        let r3 = compare_coupled(a, b, Tolerance::Residuals(3.0))?;
        let r5 = compare_coupled(a, b, Tolerance::Residuals(5.0))?;
        monotonicity.push(MonotonicityDefect {
            lower_level: levels[j],
            upper_level: levels[j + 1],
            pairs: r3.pairs,
            violations: r3.violations,
            violations_wide: r5.violations,
            max_excess: r3.max_excess,
        });
        for &delta in deltas {
            let last = grid.floor_index(grid.t_end() - delta);
            let mut sup: f64 = 0.0;
            for i in a.start_index()..=last {
                for (u, v) in a.y_column(i).iter().zip(b.y_column(i)) {
                    sup = sup.max((v - u).abs());
                }
            }
            let s = a.start_index();
            let diff: Vec<f64> = a.y_column(s).iter().zip(b.y_column(s)).map(|(u, v)| v - u).collect();
            gaps.push(LevelGap {
                lower_level: levels[j],
                upper_level: levels[j + 1],
                delta,
                sup_gap: sup,
                gap_at_start: stats::mean(&diff),
            });
        }
    }
    let bounds = solutions
        .iter()
        .zip(levels)
        .map(|(s, &n)| check_apriori_bound(s, q, Some(n)))
        .collect();
    Ok(LadderResult {
        q,
        levels: levels.to_vec(),
        solutions,
        monotonicity,
        bounds,
        gaps,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncatedMoment {
    pub t: f64,
    /// `E ∫_0^t |Z_r|² dr`
    pub moment: Estimate,
    /// `κ / (q(T - t))^{2/q}`
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SingularEstimates {
    pub kappa: f64,
    /// `E ∫_0^T (T - s)^{2/q} |Z_s|² ds`
    pub z_weighted_moment: Estimate,
    /// `(8 + K_g T) / (1 - ε) · q^{-2/q}`
    pub z_moment_bound: f64,
    pub weighted_passed: bool,
    pub z_truncated_moments: Vec<TruncatedMoment>,
    pub truncated_passed: bool,
}

/// Monte-Carlo moments of `Z` against the two bounds; each passes when the
/// estimate is below the bound plus three standard errors.
pub fn estimate_z_moments(sol: &BackwardSolution, q: f64, kg: f64, eps: f64) -> SingularEstimates {
    let grid = sol.grid();
    let t_end = grid.t_end() - grid.t_start();
    let dt = grid.dt();
    let n = sol.n_paths();
    let kappa = oracles::kappa(kg, t_end, eps);
    let mut weighted = vec![0.0; n];
    let mut running = vec![0.0; n];
    let mut truncated = Vec::new();
    for i in sol.start_index()..grid.n_steps() {
        let tau = grid.t_end() - grid.node(i);
        let z2 = sol.z_norm2_column(i);
        let w = tau.powf(2.0 / q) * dt;
        for p in 0..n {
            weighted[p] += w * z2[p];
            running[p] += dt * z2[p];
        }
        // Moment over [0, t_{i+1}], bound at t_{i+1} (finite for i + 1 < N).
        if i + 1 < grid.n_steps() {
            let tau_next = grid.t_end() - grid.node(i + 1);
            let moment = Estimate::from_samples(&running);
            let bound = oracles::truncated_z_bound(kappa, q, tau_next);
            truncated.push(TruncatedMoment {
                t: grid.node(i + 1),
                moment,
                bound,
                passed: moment.mean <= bound + 3.0 * moment.se,
            });
        }
    }
    let z_weighted_moment = Estimate::from_samples(&weighted);
    let z_moment_bound = oracles::sharp_z_bound(kg, t_end, eps, q);
    SingularEstimates {
        kappa,
        weighted_passed: z_weighted_moment.mean <= z_moment_bound + 3.0 * z_weighted_moment.se,
        z_weighted_moment,
        z_moment_bound,
        truncated_passed: truncated.iter().all(|m| m.passed),
        z_truncated_moments: truncated,
    }
}

/// True under the hypotheses that give `Y_t → ξ` as `t → T`: `q > 2`, or
/// bounded smooth elliptic coefficients with `h` Lipschitz on sublevel sets.
pub fn continuity_hypotheses_hold(q: f64, sde: &SdeCoefficients, terminal: &TerminalCondition) -> bool {
    q > 2.0 || (sde.bounded && sde.smooth && sde.elliptic_lambda > 0.0 && terminal.lipschitz_on_sublevels)
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceAtDelta {
    pub delta: f64,
    pub node: usize,
    /// Paths with `X_T` in the regular set.
    pub regular_count: usize,
    /// Mean and RMS of `Y_{T-δ} - h(X_T)` on the regular set.
    pub regular_mean_gap: f64,
    pub regular_rms_gap: f64,
    /// Paths with `X_T` in `S`.
    pub singular_count: usize,
    /// Mean of `Y_{T-δ} / (qδ)^{-1/q}` on `S`.
    pub singular_ratio: f64,
    /// Fraction of paths with `Y_{T-δ} ≥ (h(X_T) ∧ n_K) - tol`.
    pub liminf_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceReport {
    pub top_level: f64,
    pub within_hypotheses: bool,
    pub note: Option<String>,
    pub deltas: Vec<TraceAtDelta>,
    pub warnings: Vec<String>,
}

/// Behaviour of the top ladder level near `T`. The regular set is
/// `{h(X_T) ≤ regular_cap}` minus a `margin` neighbourhood of `S` when a
/// distance to `S` is known.
pub fn terminal_behavior(
    ladder: &LadderResult,
    terminal: &TerminalCondition,
    fwd: &ForwardPaths,
    sde: &SdeCoefficients,
    deltas: &[f64],
    regular_cap: f64,
    margin: f64,
) -> TraceReport {
    let top = ladder.top();
    let grid = top.grid();
    let n_steps = grid.n_steps();
    let n = top.n_paths();
    let q = ladder.q;
    let nk = ladder.top_level();
    let within = continuity_hypotheses_hold(q, sde, terminal);
    let mut warnings = Vec::new();
    let mut out = Vec::new();
    for &delta in deltas {
        let back = (delta / grid.dt()).round() as usize;
        if back == 0 || back > n_steps - top.start_index() {
            warnings.push(format!("delta {delta} does not map to a solved node"));
            continue;
        }
        let node = n_steps - back;
        let delta_eff = grid.t_end() - grid.node(node);
        let tol = top.root_tol() + 3.0 * top.residuals()[node];
        let (mut rc, mut rs, mut rs2, mut sc, mut sr, mut ok) = (0, 0.0, 0.0, 0, 0.0, 0);
        let scale = oracles::apriori_bound(q, delta_eff);
        for p in 0..n {
            let xt = fwd.x(p, n_steps);
            let h = terminal.raw(xt);
            let y = top.y(node, p);
            if y >= h.min(nk) - tol {
                ok += 1;
            }
            if terminal.in_singular_set(xt) {
                sc += 1;
                sr += y / scale;
                continue;
            }
            let near = terminal.dist_to_singular_set(xt).is_some_and(|d| d < margin);
            if h <= regular_cap && !near {
                rc += 1;
                rs += y - h;
                rs2 += (y - h) * (y - h);
            }
        }
        if rc == 0 {
            warnings.push(format!("delta {delta}: no paths end in the regular set"));
        }
        out.push(TraceAtDelta {
            delta: delta_eff,
            node,
            regular_count: rc,
            regular_mean_gap: if rc > 0 { rs / rc as f64 } else { f64::NAN },
            regular_rms_gap: if rc > 0 { (rs2 / rc as f64).sqrt() } else { f64::NAN },
            singular_count: sc,
            singular_ratio: if sc > 0 { sr / sc as f64 } else { f64::NAN },
            liminf_fraction: ok as f64 / n as f64,
        });
    }
    TraceReport {
        top_level: nk,
        within_hypotheses: within,
        note: (!within).then(|| "outside the hypotheses of the continuity theorem".to_string()),
        deltas: out,
        warnings,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FloorGap {
    pub m: f64,
    /// `sup_t E |Ỹ^{n,m}_t - Y^n_t|²`
    pub sup_gap: Estimate,
    pub t_at_sup: f64,
    /// `e^{(1 + K_g) T} / m²`
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FloorGapReport {
    pub level: f64,
    pub gaps: Vec<FloorGap>,
    /// Least-squares slope of `log gap` on `log m` over positive gaps.
    pub slope: Option<f64>,
}

/// Effect of the floor `1/m` on the level-`n` solution.
#[allow(clippy::too_many_arguments)]
pub fn floor_ladder_gap(
    fwd: &ForwardPaths,
    q: f64,
    g: &NoiseCoefficientSpec,
    terminal: &TerminalCondition,
    n: f64,
    ms: &[f64],
    noise: &DualBrownianPaths,
    cfg: &LsmcConfig,
) -> Result<FloorGapReport> {
    if !(n > 0.0) || ms.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::Config("floor gap needs n > 0 and m > 0".into()));
    }
    let f = GeneratorSpec::power_law(q)?;
    let solve = |tc: TerminalCondition| {
        let problem = BdsdeProblem {
            f: f.clone(),
            g: g.clone(),
            terminal: tc,
        };
        solve_lsmc(fwd, &problem, noise, cfg)
    };
    let base = solve(terminal.truncate(n))?;
    let floored: Vec<BackwardSolution> = ms
        .par_iter()
        .map(|&m| solve(terminal.floor(n, m)))
        .collect::<Result<_>>()?;
    let grid = noise.grid();
    let t_end = grid.t_end() - grid.t_start();
    let mut gaps = Vec::new();
    for (sol, &m) in floored.iter().zip(ms) {
        let mut best = Estimate { mean: -1.0, se: 0.0 };
        let mut t_at = grid.t_start();
        for i in base.start_index()..=grid.n_steps() {
            let d2: Vec<f64> = sol
                .y_column(i)
                .iter()
                .zip(base.y_column(i))
                .map(|(a, b)| (a - b) * (a - b))
                .collect();
            let e = Estimate::from_samples(&d2);
            if e.mean > best.mean {
                best = e;
                t_at = grid.node(i);
            }
        }
        let bound = oracles::floor_gap_bound(g.kg, t_end, m);
        gaps.push(FloorGap {
            m,
            passed: best.mean <= bound + 3.0 * best.se,
            sup_gap: best,
            t_at_sup: t_at,
            bound,
        });
    }
    let pos: Vec<(f64, f64)> = gaps
        .iter()
        .filter(|g| g.sup_gap.mean > 0.0)
        .map(|g| (g.m, g.sup_gap.mean))
        .collect();
    let slope = (pos.len() >= 2).then(|| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pos.into_iter().unzip();
        stats::log_log_slope(&xs, &ys)
    });
    Ok(FloorGapReport { level: n, gaps, slope })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::grid::TimeGrid;
    use crate::noise::sample_paths;
    use crate::regression::RegressionBasis;
    use crate::sde::{euler_maruyama, InitialLaw};

    fn bm(n_steps: usize, n_paths: usize, seed: u64, init: InitialLaw) -> (DualBrownianPaths, ForwardPaths) {
        let grid = TimeGrid::uniform(0.0, 1.0, n_steps).unwrap();
        let noise = sample_paths(&grid, 1, 1, n_paths, seed).unwrap();
        let sde = SdeCoefficients::constant(vec![0.0], vec![1.0], 1).unwrap();
        let fwd = euler_maruyama(&sde, 0.0, &init, &noise).unwrap();
        (noise, fwd)
    }

    fn infinite() -> TerminalCondition {
        TerminalCondition::singular(Arc::new(|_| f64::INFINITY))
    }

    fn inverse_distance() -> TerminalCondition {
        TerminalCondition::singular(Arc::new(|x: &[f64]| 1.0 / x[0].abs()))
            .with_singular_set(Arc::new(|x: &[f64]| x[0] == 0.0), Some(Arc::new(|x: &[f64]| x[0].abs())))
    }

    #[test]
    fn closed_form_bound_values() {
        assert!((oracles::apriori_bound(2.0, 0.5) - 1.0).abs() < 1e-15);
        assert!((oracles::xi(1.0, 0.25, 2.0) - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(geometric_levels(3), vec![1.0, 2.0, 4.0, 8.0]);
        assert_eq!(delta_schedule(1.0, 2), vec![0.125, 0.0625]);
    }

    #[test]
    fn infinite_terminal_levels_follow_closed_form() {
        let (noise, fwd) = bm(128, 16, 1, InitialLaw::Point(vec![0.0]));
        let cfg = LsmcConfig::new(RegressionBasis::constant());
        let levels = geometric_levels(4);
        let ladder = solve_singular_ladder(&fwd, 1.0, &NoiseCoefficientSpec::zero(1), &infinite(), &levels, &noise, &cfg, &[0.25])
            .unwrap();
        for (sol, &n) in ladder.solutions.iter().zip(&levels) {
            assert!((sol.y(0, 0) - oracles::xi(1.0, 1.0, n)).abs() < 1e-12);
        }
        for g in &ladder.gaps {
            let expect = oracles::xi(1.0, 1.0, g.upper_level) - oracles::xi(1.0, 1.0, g.lower_level);
            assert!((g.gap_at_start - expect).abs() < 1e-12);
        }
        assert_eq!(ladder.hard_bound_violations(), 0);
        assert!(ladder.monotonicity.iter().all(|m| m.violations == 0));
        let z = estimate_z_moments(ladder.top(), 1.0, 0.0, 0.0);
        assert_eq!(z.kappa, 1.0);
        assert!(z.z_weighted_moment.mean < 1e-20);
        assert!(z.weighted_passed && z.truncated_passed);
    }

    #[test]
    fn bounded_terminal_saturates() {
        let (noise, fwd) = bm(32, 500, 2, InitialLaw::UniformBox { lo: vec![-1.0], hi: vec![1.0] });
        let tc = TerminalCondition::bounded(Arc::new(|x: &[f64]| 1.0 + x[0].abs().min(2.0)), 3.0).unwrap();
        let cfg = LsmcConfig::new(RegressionBasis::piecewise_constant(8)).with_control_variate(false);
        let ladder = solve_singular_ladder(&fwd, 1.0, &NoiseCoefficientSpec::zero(1), &tc, &[4.0, 8.0, 16.0], &noise, &cfg, &[0.1])
            .unwrap();
        let (a, b) = (&ladder.solutions[0], &ladder.solutions[2]);
        for i in 0..=32 {
            assert_eq!(a.y_column(i), b.y_column(i));
        }
    }

    #[test]
    fn inverse_distance_ladder_converges() {
        let law = InitialLaw::UniformBox { lo: vec![-1.5], hi: vec![1.5] };
        let (noise, fwd) = bm(64, 8000, 3, law);
        let cfg = LsmcConfig::new(RegressionBasis::piecewise_constant(24)).with_control_variate(false);
        let g = NoiseCoefficientSpec::linear(0.0, vec![0.3]).unwrap();
        let levels = geometric_levels(6);
        let ladder = solve_singular_ladder(&fwd, 1.0, &g, &inverse_distance(), &levels, &noise, &cfg, &[0.25]).unwrap();
        let sups: Vec<f64> = ladder.gaps.iter().map(|g| g.sup_gap).collect();
        // Gaps on [0, T - δ] shrink once the level exceeds the bound there.
        assert!(sups[5] < sups[2], "{sups:?}");
        for m in &ladder.monotonicity {
            assert!(m.violations_wide == 0, "{m:?}");
        }
        let z = estimate_z_moments(ladder.top(), 1.0, g.kg, g.eps);
        assert!(z.weighted_passed, "{:?}", z.z_weighted_moment);
    }

    #[test]
    fn ladder_needs_vanishing_noise() {
        let (noise, fwd) = bm(8, 10, 1, InitialLaw::Point(vec![0.0]));
        let cfg = LsmcConfig::new(RegressionBasis::constant());
        let g = NoiseCoefficientSpec::constant(1, 1.0);
        assert!(matches!(
            solve_singular_ladder(&fwd, 1.0, &g, &infinite(), &[1.0], &noise, &cfg, &[]),
            Err(Error::Mode(_))
        ));
        assert!(matches!(
            solve_singular_ladder(&fwd, 1.0, &NoiseCoefficientSpec::zero(1), &infinite(), &[2.0, 1.0], &noise, &cfg, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn floor_gap_from_closed_forms() {
        // h = 0: Y^n = 0 and the floored solution is Ξ^{m}-type from 1/m.
        let (noise, fwd) = bm(64, 4, 1, InitialLaw::Point(vec![0.0]));
        let cfg = LsmcConfig::new(RegressionBasis::constant());
        let zero = TerminalCondition::singular(Arc::new(|_| 0.0));
        let r = floor_ladder_gap(&fwd, 1.0, &NoiseCoefficientSpec::zero(1), &zero, 1.0, &[2.0, 4.0, 8.0], &noise, &cfg).unwrap();
        for g in &r.gaps {
            assert!((g.sup_gap.mean - 1.0 / (g.m * g.m)).abs() < 1e-12);
            assert!(g.sup_gap.mean <= 1f64.exp() / (g.m * g.m));
            assert!(g.passed);
        }
        assert!((r.slope.unwrap() + 2.0).abs() < 1e-9);
        // h >= 1/m already: no change.
        let high = TerminalCondition::singular(Arc::new(|_| 3.0));
        let r = floor_ladder_gap(&fwd, 1.0, &NoiseCoefficientSpec::zero(1), &high, 5.0, &[2.0], &noise, &cfg).unwrap();
        assert_eq!(r.gaps[0].sup_gap.mean, 0.0);
    }

    #[test]
    fn trace_near_terminal_time() {
        let (noise, fwd) = bm(128, 16, 1, InitialLaw::Point(vec![0.0]));
        let cfg = LsmcConfig::new(RegressionBasis::constant());
        let ladder = solve_singular_ladder(&fwd, 1.0, &NoiseCoefficientSpec::zero(1), &infinite(), &geometric_levels(12), &noise, &cfg, &[])
            .unwrap();
        let sde = SdeCoefficients::constant(vec![0.0], vec![1.0], 1).unwrap();
        let deltas = delta_schedule(1.0, 3);
        let rep = terminal_behavior(&ladder, &infinite(), &fwd, &sde, &deltas, 10.0, 0.0);
        assert!(!rep.within_hypotheses && rep.note.is_some());
        let tc = infinite().with_lipschitz_on_sublevels(true);
        let rep = terminal_behavior(&ladder, &tc, &fwd, &sde, &deltas, 10.0, 0.0);
        assert!(rep.within_hypotheses && rep.note.is_none());
        for d in &rep.deltas {
            assert_eq!(d.singular_count, 16);
            assert!((d.singular_ratio - 1.0).abs() < 0.05, "{d:?}");
            assert!(d.regular_count == 0);
        }
        assert!(!rep.warnings.is_empty());
    }
}
