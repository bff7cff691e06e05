use crate::drivers::NoiseCoefficientSpec;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::DualBrownianPaths;
use crate::sde::ForwardPaths;

use super::{backward_sweep, BackwardSolution, BdsdeProblem, Frozen, LsmcConfig, Sweep};

/// Values `g(t_i)` of a state-independent noise coefficient at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct GPath {
    m: usize,
    values: Vec<f64>,
}

impl GPath {
    /// `values` is node-major, `m` components per node.
    pub fn new(m: usize, values: Vec<f64>) -> Self {
        Self { m, values }
    }

    /// Tabulates `g`; fails with a mode error when `g` depends on the state.
    pub fn from_spec(g: &NoiseCoefficientSpec, grid: &TimeGrid) -> Result<Self> {
        if !g.state_free() {
            return Err(Error::Mode(
                "shift reduction needs g depending on time only (y-, z- and x-free)".into(),
            ));
        }
        let mut values = vec![0.0; grid.n_nodes() * g.m];
        for (i, &t) in grid.nodes().iter().enumerate() {
            g.eval(t, &[], 0.0, &[], &mut values[i * g.m..(i + 1) * g.m]);
        }
        Ok(Self { m: g.m, values })
    }

    pub fn at(&self, node: usize) -> &[f64] {
        &self.values[node * self.m..(node + 1) * self.m]
    }

    /// `∫_0^{t_i} g ←dB` at every node, right-endpoint rule.
    pub fn backward_integrals(&self, noise: &DualBrownianPaths) -> Result<Vec<f64>> {
        let n_nodes = noise.grid().n_nodes();
        if self.values.len() != n_nodes * self.m || self.m != noise.b_dim() {
            return Err(Error::Shape(format!(
                "g path has {} values with {} components for {} nodes and {} B components",
                self.values.len(),
                self.m,
                n_nodes,
                noise.b_dim()
            )));
        }
        let mut acc = vec![0.0; n_nodes];
        for i in 0..n_nodes - 1 {
            let inc: f64 = (0..self.m).map(|l| self.at(i + 1)[l] * noise.db(i, l)).sum();
            acc[i + 1] = acc[i] + inc;
        }
        Ok(acc)
    }
}

/// Solves the equation through `U_t = Y_t + ∫_0^t g_r ←dB_r`, an ordinary
/// backward equation with terminal value `ξ + ∫_0^T g ←dB` and generator
/// `f(t, u - ∫_0^t g ←dB, z)`, then returns `Y = U - ∫_0^t g ←dB`.
pub fn solve_shift_reduction(
    fwd: &ForwardPaths,
    problem: &BdsdeProblem,
    g_path: &GPath,
    noise: &DualBrownianPaths,
    cfg: &LsmcConfig,
) -> Result<(BackwardSolution, Vec<f64>)> {
    if !problem.g.y_free || !problem.g.z_free {
        return Err(Error::Mode(
            "shift reduction is only valid for g independent of (y, z)".into(),
        ));
    }
    let shift = g_path.backward_integrals(noise)?;
    let sol = backward_sweep(
        fwd,
        problem,
        noise,
        cfg,
        Sweep {
            frozen: Frozen::Current,
            shift: Some(&shift),
        },
    )?;
    Ok((sol, shift))
}

impl BackwardSolution {
    /// `U_{t_i} = Y_{t_i} + shift_i` for one path.
    pub fn shifted(&self, node: usize, path: usize, shift: &[f64]) -> f64 {
        self.y(node, path) + shift[node]
    }
}
