//! The `simulate`, `ladder` and `field` commands. Each returns its numerical
//! outcome together with the tables it writes, so `verify` can reuse them.

use std::time::Instant;

use serde_json::json;

use bdsde_core::drivers::{validate_assumptions, TerminalKind};
use bdsde_core::field::{
    build_field, malliavin_identity_check, support_touches_singular_set, terminal_trace, weak_form_residual,
    weighted_norm, IdentityGap, NormReport, RandomField, TraceCurve, WeakFormResidual, WeightFunction,
};
use bdsde_core::noise::DualBrownianPaths;
use bdsde_core::oracles;
use bdsde_core::sde::ForwardPaths;
use bdsde_core::singular::{
    check_apriori_bound, estimate_z_moments, floor_ladder_gap, solve_singular_ladder, terminal_behavior, BoundReport,
    FloorGapReport, LadderResult, SingularEstimates, TraceReport,
};
use bdsde_core::solver::{
    picard_solve, solve_lsmc, solve_shift_reduction, BackwardSolution, ContractionTrace, GPath,
};

use crate::error::{CliError, CliResult};
use crate::io::{Artifacts, Cell, RunManifest, Table};
use crate::scenario::{Scenario, SolverMode};

/// Probes used by the assumption validator.
const VALIDATION_PROBES: usize = 512;
/// Paths written to `y_sample`.
const SAMPLE_PATHS: usize = 8;

pub struct SimRun {
    pub noise: DualBrownianPaths,
    pub fwd: ForwardPaths,
    pub sol: BackwardSolution,
    pub picard: Option<ContractionTrace>,
    pub bound: Option<BoundReport>,
}

pub struct SimOutcome {
    pub runs: Vec<SimRun>,
}

fn record_seeds(sc: &Scenario, m: &mut RunManifest) {
    m.seeds.insert(format!("{}.seed", sc.name), sc.noise.seed);
    m.seeds.insert(format!("{}.b_index", sc.name), sc.noise.b_index);
}

fn record_validation(sc: &Scenario, m: &mut RunManifest) -> CliResult<()> {
    let sde = sc.sde()?;
    let report = validate_assumptions(
        &sc.generator()?,
        &sc.noise_coefficient()?,
        sde.dim(),
        sde.noise_dim(),
        VALIDATION_PROBES,
        sc.noise.seed,
    )?;
    for c in &report.checks {
        m.check(
            &format!("{}.{}", sc.name, c.name),
            c.passed,
            format!("worst excess {:e}", c.worst_excess),
        );
        if !c.passed {
            m.warnings.push(format!(
                "{}: declared assumption {} not confirmed by probes (worst excess {:e}{})",
                sc.name,
                c.name,
                c.worst_excess,
                c.witness.as_deref().map(|w| format!(", at {w}")).unwrap_or_default()
            ));
        }
    }
    for w in sde.check_flags(VALIDATION_PROBES, sc.noise.seed) {
        m.warnings.push(format!("{}: {w}", sc.name));
    }
    Ok(())
}

fn record_constants(sc: &Scenario, m: &mut RunManifest) -> CliResult<()> {
    let f = sc.generator()?;
    let g = sc.noise_coefficient()?;
    let t = sc.grid.t_end - sc.start_time();
    m.constant("kg", g.kg);
    m.constant("eps", g.eps);
    m.constant("picard_alpha", oracles::picard_alpha(f.mu, f.kf, g.kg, g.eps));
    m.constant("picard_eta", oracles::picard_eta(g.eps));
    m.constant("picard_factor", oracles::picard_factor(g.eps));
    m.constant("kappa", oracles::kappa(g.kg, t, g.eps));
    if let Some(q) = f.power_q() {
        m.constant("q", q);
        m.constant("z_moment_bound", oracles::sharp_z_bound(g.kg, t, g.eps, q));
    }
    Ok(())
}

fn solve_one(sc: &Scenario, noise: &DualBrownianPaths, fwd: &ForwardPaths) -> CliResult<(BackwardSolution, Option<ContractionTrace>)> {
    let problem = sc.problem()?;
    let cfg = sc.lsmc_config()?;
    Ok(match sc.solver.mode {
        SolverMode::Lsmc => (solve_lsmc(fwd, &problem, noise, &cfg)?, None),
        SolverMode::Shift => {
            let gp = GPath::from_spec(&problem.g, noise.grid())?;
            (solve_shift_reduction(fwd, &problem, &gp, noise, &cfg)?.0, None)
        }
        SolverMode::Picard => {
            let (sol, trace) = picard_solve(fwd, &problem, noise, &cfg, &sc.picard_config())?;
            (sol, Some(trace))
        }
    })
}

/// Solves the scenario for each of its `n_B` backward-noise realizations.
pub fn simulate(sc: &Scenario, m: &mut RunManifest) -> CliResult<(SimOutcome, Artifacts)> {
    record_seeds(sc, m);
    let terminal = sc.terminal()?;
    if terminal.kind == TerminalKind::Singular {
        return Err(CliError::Core(bdsde_core::Error::Mode(
            "simulate needs a bounded or regular terminal condition; use `ladder` for singular data".into(),
        )));
    }
    let t0 = Instant::now();
    record_validation(sc, m)?;
    m.phase("validate", t0);
    record_constants(sc, m)?;
    let q = sc.generator()?.power_q();

    let mut runs = Vec::new();
    for j in 0..sc.noise.n_b as u64 {
        let run = m.timed("solve", || {
            let noise = sc.noise(j)?;
            let fwd = sc.forward_paths(&noise)?;
            let (sol, picard) = solve_one(sc, &noise, &fwd)?;
            let bound = q.map(|q| check_apriori_bound(&sol, q, terminal.sup()));
            Ok(SimRun { noise, fwd, sol, picard, bound })
        })?;
        if let Some(t) = &run.picard {
            if let Some(w) = &t.warning {
                m.warnings.push(w.clone());
            }
        }
        runs.push(run);
    }

    let mut art = Artifacts::default();
    let mut summary = Table::new("solution", &["b", "node", "t", "mean_y", "std_y", "mean_abs_z", "residual"]);
    let mut sample = Table::new(
        "y_sample",
        &["b", "node", "t", "path", "x", "y", "z"],
    );
    for (j, run) in runs.iter().enumerate() {
        let start = run.sol.start_index();
        for (i, s) in run.sol.node_summary().iter().enumerate().skip(start) {
            summary.push(vec![
                j.into(),
                i.into(),
                s.t.into(),
                s.mean_y.into(),
                s.std_y.into(),
                s.mean_abs_z.into(),
                s.residual.into(),
            ]);
        }
        for i in start..run.sol.grid().n_nodes() {
            for p in 0..run.sol.n_paths().min(SAMPLE_PATHS) {
                sample.push(vec![
                    j.into(),
                    i.into(),
                    run.sol.grid().node(i).into(),
                    p.into(),
                    run.fwd.x(p, i)[0].into(),
                    run.sol.y(i, p).into(),
                    if i < run.sol.grid().n_steps() {
                        run.sol.z(i, p).first().copied().unwrap_or(0.0).into()
                    } else {
                        f64::NAN.into()
                    },
                ]);
            }
        }
    }
    art.table(summary);
    art.table(sample);

    if let Some(first) = runs.first() {
        if let Some(trace) = &first.picard {
            let mut t = Table::new("picard", &["sweep", "gap", "weighted_gap", "ratio"]);
            for (k, (g, w)) in trace.gaps.iter().zip(&trace.weighted_gaps).enumerate() {
                let ratio = if k == 0 { f64::NAN } else { trace.ratios[k - 1] };
                t.push(vec![k.into(), (*g).into(), (*w).into(), ratio.into()]);
            }
            art.table(t);
            m.constant("picard_alpha_used", trace.alpha);
            m.constant("picard_eta_used", trace.eta);
            if let Some(r) = trace.max_ratio_after_first() {
                m.check("picard_ratio", r <= oracles::picard_factor(sc.noise_coefficient()?.eps) + 0.1, format!("max ratio {r:e}"));
            }
        }
    }
    let mut bounds = bound_table("bounds");
    for (j, run) in runs.iter().enumerate() {
        if let Some(b) = &run.bound {
            push_bounds(&mut bounds, j as f64, b);
            m.check(
                &format!("apriori_bound.b{j}"),
                b.hard_violations == 0,
                format!("{} hard violations, max excess {:e}", b.hard_violations, b.max_excess),
            );
        }
    }
    if !bounds.rows.is_empty() {
        art.table(bounds);
    }
    Ok((SimOutcome { runs }, art))
}

fn bound_table(name: &str) -> Table {
    Table::new(name, &["level", "t", "max_y", "bound", "level_bound", "tol", "excess"])
}

fn push_bounds(t: &mut Table, level: f64, b: &BoundReport) {
    for n in &b.nodes {
        t.push(vec![
            level.into(),
            n.t.into(),
            n.max_y.into(),
            n.bound.into(),
            n.level_bound.unwrap_or(f64::NAN).into(),
            n.tol.into(),
            n.excess.into(),
        ]);
    }
}

pub struct LadderOutcome {
    pub noise: DualBrownianPaths,
    pub fwd: ForwardPaths,
    pub ladder: LadderResult,
    pub moments: Vec<SingularEstimates>,
    pub trace: TraceReport,
    pub floor: Option<FloorGapReport>,
}

/// Monotone ladder `Y^{n_0} ≤ Y^{n_1} ≤ ...` on one coupled noise.
pub fn ladder(sc: &Scenario, m: &mut RunManifest) -> CliResult<(LadderOutcome, Artifacts)> {
    record_seeds(sc, m);
    let t0 = Instant::now();
    record_validation(sc, m)?;
    m.phase("validate", t0);
    record_constants(sc, m)?;
    let q = sc.power_q()?;
    let levels = sc.ladder_levels()?;
    let deltas = sc.ladder_deltas();
    let g = sc.noise_coefficient()?;
    let terminal = sc.terminal()?;
    let cfg = sc.lsmc_config()?;
    let sde = sc.sde()?;
    let spec = sc.ladder.clone().expect("ladder_levels checked the section");
    if sc.noise.n_b > 1 {
        m.warnings.push("ladder uses only the first B realization".into());
    }

    let noise = m.timed("noise", || sc.noise(0))?;
    let fwd = m.timed("forward", || sc.forward_paths(&noise))?;
    let ladder = m.timed("ladder", || {
        Ok(solve_singular_ladder(&fwd, q, &g, &terminal, &levels, &noise, &cfg, &deltas)?)
    })?;
    let moments: Vec<SingularEstimates> = ladder
        .solutions
        .iter()
        .map(|s| estimate_z_moments(s, q, g.kg, g.eps))
        .collect();
    let regular_cap = spec.regular_cap.unwrap_or_else(|| ladder.top_level().sqrt());
    let trace = terminal_behavior(&ladder, &terminal, &fwd, &sde, &deltas, regular_cap, spec.margin.unwrap_or(0.0));
    m.warnings.extend(trace.warnings.iter().cloned());
    if let Some(n) = &trace.note {
        m.warnings.push(n.clone());
    }
    let floor = match &spec.floors {
        Some(ms) => {
            let n = spec.floor_level.unwrap_or_else(|| ladder.top_level());
            Some(m.timed("floor", || Ok(floor_ladder_gap(&fwd, q, &g, &terminal, n, ms, &noise, &cfg)?))?)
        }
        None => None,
    };

    let mut art = Artifacts::default();
    let mut lv = Table::new("ladder", &["level", "node", "t", "mean_y", "max_y", "residual"]);
    for (n, sol) in ladder.levels.iter().zip(&ladder.solutions) {
        for i in sol.start_index()..sol.grid().n_nodes() {
            let col = sol.y_column(i);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let res = sol.residuals().get(i).copied().unwrap_or(0.0);
            lv.push(vec![(*n).into(), i.into(), sol.grid().node(i).into(), mean.into(), max.into(), res.into()]);
        }
    }
    art.table(lv);

    let mut mono = Table::new("monotonicity", &["lower", "upper", "pairs", "violations", "violations_wide", "max_excess"]);
    for d in &ladder.monotonicity {
        mono.push(vec![
            d.lower_level.into(),
            d.upper_level.into(),
            d.pairs.into(),
            d.violations.into(),
            d.violations_wide.into(),
            d.max_excess.into(),
        ]);
    }
    art.table(mono);

    let mut bounds = bound_table("bounds");
    for (n, b) in ladder.levels.iter().zip(&ladder.bounds) {
        push_bounds(&mut bounds, *n, b);
    }
    art.table(bounds);
    m.check(
        "apriori_bound",
        ladder.hard_bound_violations() == 0,
        format!("{} hard violations", ladder.hard_bound_violations()),
    );

    let mut gaps = Table::new("level_gaps", &["lower", "upper", "delta", "sup_gap", "gap_at_start"]);
    for gp in &ladder.gaps {
        gaps.push(vec![
            gp.lower_level.into(),
            gp.upper_level.into(),
            gp.delta.into(),
            gp.sup_gap.into(),
            gp.gap_at_start.into(),
        ]);
    }
    art.table(gaps);

    let mut zm = Table::new("z_moments", &["level", "t", "moment", "se", "bound", "passed"]);
    for (n, est) in ladder.levels.iter().zip(&moments) {
        zm.push(vec![
            (*n).into(),
            f64::NAN.into(),
            est.z_weighted_moment.mean.into(),
            est.z_weighted_moment.se.into(),
            est.z_moment_bound.into(),
            est.weighted_passed.into(),
        ]);
        for tm in &est.z_truncated_moments {
            zm.push(vec![
                (*n).into(),
                tm.t.into(),
                tm.moment.mean.into(),
                tm.moment.se.into(),
                tm.bound.into(),
                tm.passed.into(),
            ]);
        }
    }
    art.table(zm);
    if let Some(top) = moments.last() {
        m.constant("kappa", top.kappa);
        m.constant("z_moment_bound", top.z_moment_bound);
        m.check("z_moments", moments.iter().all(|e| e.weighted_passed && e.truncated_passed), "all levels");
    }

    let mut tb = Table::new(
        "terminal_behavior",
        &["delta", "node", "regular_count", "regular_mean_gap", "regular_rms_gap", "singular_count", "singular_ratio", "liminf_fraction"],
    );
    for d in &trace.deltas {
        tb.push(vec![
            d.delta.into(),
            d.node.into(),
            d.regular_count.into(),
            d.regular_mean_gap.into(),
            d.regular_rms_gap.into(),
            d.singular_count.into(),
            d.singular_ratio.into(),
            d.liminf_fraction.into(),
        ]);
    }
    art.table(tb);

    if let Some(fr) = &floor {
        let mut t = Table::new("floor_gaps", &["level", "m", "sup_gap", "se", "t_at_sup", "bound", "passed"]);
        for gp in &fr.gaps {
            t.push(vec![
                fr.level.into(),
                gp.m.into(),
                gp.sup_gap.mean.into(),
                gp.sup_gap.se.into(),
                gp.t_at_sup.into(),
                gp.bound.into(),
                gp.passed.into(),
            ]);
        }
        art.table(t);
        m.check("floor_gap", fr.gaps.iter().all(|g| g.passed), "all floors");
    }
    Ok((LadderOutcome { noise, fwd, ladder, moments, trace, floor }, art))
}

pub struct FieldOutcome {
    pub fields: Vec<RandomField>,
    pub norm: Option<NormReport>,
    pub weak_form: Option<WeakFormResidual>,
    pub trace: Option<TraceCurve>,
    pub identity: Option<IdentityGap>,
}

/// Field `u(t, x) = Y^{t,x}_t` on the lattice, one per B realization, plus
/// the diagnostics requested in `[field]`.
pub fn field(sc: &Scenario, m: &mut RunManifest) -> CliResult<(FieldOutcome, Artifacts)> {
    record_seeds(sc, m);
    let spec = sc.field.clone().ok_or_else(|| CliError::Config("missing [field] section".into()))?;
    let terminal = sc.terminal()?;
    let space = sc.spatial_grid()?;
    let sde = sc.sde()?;
    let grid = sc.grid()?;
    let q = sc.generator()?.power_q();

    let phi = match &spec.trace {
        Some(tr) => {
            let phi = sc.test_function(&tr.phi)?.space;
            if tr.finite && support_touches_singular_set(phi.as_ref(), &terminal, &space) {
                return Err(CliError::Core(bdsde_core::Error::Mode(format!(
                    "finite trace requested but the support of {} meets the singular set",
                    tr.phi
                ))));
            }
            Some(phi)
        }
        None => None,
    };
    let t0 = Instant::now();
    record_validation(sc, m)?;
    m.phase("validate", t0);
    record_constants(sc, m)?;

    let mut problem = sc.problem()?;
    if terminal.kind == TerminalKind::Singular {
        let top = *sc.ladder_levels()?.last().expect("non-empty ladder");
        problem.terminal = terminal.truncate(top);
        m.constant("field_level", top);
    }
    let cfg = sc.lsmc_config()?;
    let n_paths = spec.n_paths.unwrap_or(sc.noise.n_paths);
    let fields: Vec<RandomField> = m.timed("field", || {
        (0..sc.noise.n_b as u64)
            .map(|j| {
                Ok(build_field(
                    &sde,
                    &problem,
                    &cfg,
                    &space,
                    &grid,
                    n_paths,
                    sc.noise.seed,
                    sc.noise.b_index + j,
                    sc.noise.b_dim,
                )?)
            })
            .collect()
    })?;
    for f in &fields {
        m.warnings.extend(f.warnings.iter().cloned());
    }

    let rho = WeightFunction::new(spec.kappa);
    let norm = match weighted_norm(&fields[0], &rho, spec.delta) {
        Ok(n) => Some(n),
        Err(e) if e.is_configuration() && !matches!(e, bdsde_core::Error::NonIntegrableWeight(_)) => {
            m.warnings.push(format!("weighted norm skipped: {e}"));
            None
        }
        Err(e) => return Err(e.into()),
    };
    let weak_form = match &spec.weak_form {
        Some(w) => {
            let psi = sc.test_function(&w.test)?;
            let (r, t) = (sc.node_of(w.r, "[field.weak_form] r")?, sc.node_of(w.t, "[field.weak_form] t")?);
            Some(weak_form_residual(&fields[0], &psi, &sde, &problem, r, t)?)
        }
        None => None,
    };
    let trace = match (&spec.trace, &phi) {
        (Some(tr), Some(phi)) => Some(terminal_trace(&fields, phi.as_ref(), &terminal, q, tr.finite)?),
        _ => None,
    };
    let identity = match &spec.malliavin {
        Some(w) => {
            let theta = sc.test_function(&w.test)?.space;
            let (r, t) = (sc.node_of(w.r, "[field.malliavin] r")?, sc.node_of(w.t, "[field.malliavin] t")?);
            Some(m.timed("malliavin", || {
                let noise = sc.noise(0)?;
                let fwd = sc.forward_paths(&noise)?;
                let sol = solve_lsmc(&fwd, &problem, &noise, &cfg)?;
                Ok(malliavin_identity_check(&sol, &fwd, &sde, theta.as_ref(), r, t)?)
            })?)
        }
        None => None,
    };

    let mut art = Artifacts::default();
    let pts = space.points();
    for (j, f) in fields.iter().enumerate() {
        let mut cols = vec!["node".to_string(), "t".to_string()];
        cols.extend((0..pts.len()).map(|p| format!("u{p}")));
        let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
        let mut t = Table::new(&format!("field_b{j}"), &col_refs);
        for i in f.start_index()..grid.n_nodes() {
            let mut row: Vec<Cell> = vec![i.into(), grid.node(i).into()];
            row.extend(f.u_row(i).iter().map(|v| Cell::F(*v)));
            t.push(row);
        }
        art.table(t);
    }
    let mut lattice = Table::new("lattice", &["point", "x"]);
    for (p, x) in pts.iter().enumerate() {
        let coords: Vec<String> = x.iter().map(|v| crate::io::fmt_f64(*v)).collect();
        lattice.push(vec![p.into(), coords.join(" ").into()]);
    }
    art.table(lattice);
    art.document(
        "field_meta",
        json!({
            "b_seed": sc.noise.seed,
            "b_indices": fields.iter().map(|f| f.b_index).collect::<Vec<_>>(),
            "grid": { "t_start": grid.t_start(), "t_end": grid.t_end(), "n_steps": grid.n_steps() },
            "box": { "lo": space.lo, "hi": space.hi, "n": space.n, "whole_space": space.whole_space },
            "kappa": spec.kappa,
            "n_paths": n_paths,
            "gradient_source": format!("{:?}", fields[0].gradient_source()),
        }),
    );
    if let Some(n) = &norm {
        let mut t = Table::new("weighted_norm", &["kappa", "t_cut", "value", "coarse_value", "refinement_delta"]);
        t.push(vec![n.kappa.into(), n.t_cut.into(), n.value.into(), n.coarse_value.into(), n.refinement_delta.into()]);
        art.table(t);
    }
    if let Some(w) = &weak_form {
        let mut t = Table::new("weak_form", &["term", "r", "t", "value", "n_steps", "h_x"]);
        for term in &w.terms {
            t.push(vec![term.name.into(), w.r.into(), w.t.into(), term.value.into(), grid.n_steps().into(), space.spacing(0).into()]);
        }
        for (name, v) in [("lhs", w.lhs), ("rhs", w.rhs), ("signed", w.signed), ("residual", w.residual)] {
            t.push(vec![name.into(), w.r.into(), w.t.into(), v.into(), grid.n_steps().into(), space.spacing(0).into()]);
        }
        art.table(t);
    }
    if let Some(c) = &trace {
        let mut t = Table::new("trace", &["node", "t", "value", "se", "quadrature_delta", "envelope", "target"]);
        for p in &c.points {
            t.push(vec![
                p.node.into(),
                p.t.into(),
                p.value.into(),
                p.se.into(),
                p.quadrature_delta.into(),
                p.envelope.unwrap_or(f64::NAN).into(),
                c.target.unwrap_or(f64::NAN).into(),
            ]);
        }
        art.table(t);
    }
    if let Some(g) = &identity {
        let mut t = Table::new("malliavin", &["r", "t", "lhs", "lhs_se", "rhs", "rhs_se", "gap", "gap_se", "passed"]);
        t.push(vec![
            g.r.into(),
            g.t.into(),
            g.lhs.mean.into(),
            g.lhs.se.into(),
            g.rhs.mean.into(),
            g.rhs.se.into(),
            g.gap.into(),
            g.gap_se.into(),
            g.passed.into(),
        ]);
        art.table(t);
        m.check("malliavin_identity", g.passed, format!("gap {:e}, se {:e}", g.gap, g.gap_se));
    }
    Ok((FieldOutcome { fields, norm, weak_form, trace, identity }, art))
}
