use serde::Serialize;

use crate::error::{Error, Result};

use super::BackwardSolution;

/// Allowance for `Y¹ > Y²` before a pair counts as a violation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    Fixed(f64),
    /// Root tolerance plus this many times the larger per-step residual of
    /// the two runs.
    Residuals(f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeViolation {
    pub node: usize,
    pub t: f64,
    pub tol: f64,
    pub violations: usize,
    pub max_excess: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub nodes: Vec<NodeViolation>,
    pub pairs: usize,
    pub violations: usize,
    /// Largest `Y¹ - Y²` over all pairs.
    pub max_excess: f64,
    /// `ξ¹ <= ξ²` on every sampled path.
    pub terminal_ordered: bool,
}

impl ComparisonReport {
    pub fn fraction(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.violations as f64 / self.pairs as f64
        }
    }
}

/// Checks `Y¹ <= Y² + tol` node by node for two runs on the same noise.
pub fn compare_coupled(
    a: &BackwardSolution,
    b: &BackwardSolution,
    tol: Tolerance,
) -> Result<ComparisonReport> {
    if a.noise_id() != b.noise_id() || !a.grid().same_as(b.grid()) {
        return Err(Error::Coupling(format!(
            "runs use different noise or grids: {:?} vs {:?}",
            a.noise_id(),
            b.noise_id()
        )));
    }
    if a.start_index() != b.start_index() {
        return Err(Error::Coupling("runs start at different nodes".into()));
    }
    let n_steps = a.grid().n_steps();
    let n = a.n_paths();
    let mut nodes = Vec::new();
    let (mut pairs, mut violations, mut max_excess) = (0, 0, f64::NEG_INFINITY);
    for i in a.start_index()..=n_steps {
        let t = match tol {
            Tolerance::Fixed(v) => v,
            Tolerance::Residuals(k) => {
                let r = if i < n_steps {
                    a.residuals()[i].max(b.residuals()[i])
                } else {
                    0.0
                };
                a.root_tol().max(b.root_tol()) + k * r
            }
        };
        let (ya, yb) = (a.y_column(i), b.y_column(i));
        let mut v = 0;
        let mut mx = f64::NEG_INFINITY;
        for p in 0..n {
            let e = ya[p] - yb[p];
            mx = mx.max(e);
            if e > t {
                v += 1;
            }
        }
        pairs += n;
        violations += v;
        max_excess = max_excess.max(mx);
        nodes.push(NodeViolation {
            node: i,
            t: a.grid().node(i),
            tol: t,
            violations: v,
            max_excess: mx,
        });
    }
    let terminal_ordered = a
        .y_column(n_steps)
        .iter()
        .zip(b.y_column(n_steps))
        .all(|(u, v)| u <= v);
    Ok(ComparisonReport {
        nodes,
        pairs,
        violations,
        max_excess,
        terminal_ordered,
    })
}
