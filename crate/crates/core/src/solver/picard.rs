use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::DualBrownianPaths;
use crate::oracles::{picard_alpha, picard_eta};
use crate::sde::ForwardPaths;

use super::{backward_sweep, BackwardSolution, BdsdeProblem, Frozen, LsmcConfig, Sweep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub max_sweeps: usize,
    /// Weight exponent; `2μ + 2K_f/(1-ε) + 2K_g/(1+ε)` when absent.
    pub alpha: Option<f64>,
    /// `2/(1-ε)` when absent.
    pub eta: Option<f64>,
    pub stop_tol: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 30,
            alpha: None,
            eta: None,
            stop_tol: 1e-20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionTrace {
    pub alpha: f64,
    pub eta: f64,
    /// `D_k = E ∫ e^{αs} (|Y^{k+1} - Y^k|² + |Z^{k+1} - Z^k|²) ds`, `k = 0, 1, ...`
    pub gaps: Vec<f64>,
    /// `E ∫ e^{αs} (|ΔZ|² + 2K_g/(1+ε) |ΔY|²) ds`, the functional the
    /// fixed-point argument contracts.
    pub weighted_gaps: Vec<f64>,
    pub ratios: Vec<f64>,
    pub converged: bool,
    pub warning: Option<String>,
}

impl ContractionTrace {
    /// Largest `D_{k+1}/D_k` after the first sweep.
    pub fn max_ratio_after_first(&self) -> Option<f64> {
        self.ratios.iter().skip(1).copied().reduce(f64::max)
    }
}

/// Fixed-point iteration starting from `(Y^0, Z^0) = (0, 0)`: sweep `k+1`
/// keeps `f(t, x, y, Z^k)` implicit in `y` and freezes `g(t, x, Y^k, Z^k)`.
pub fn picard_solve(
    fwd: &ForwardPaths,
    problem: &BdsdeProblem,
    noise: &DualBrownianPaths,
    cfg: &LsmcConfig,
    pcfg: &PicardConfig,
) -> Result<(BackwardSolution, ContractionTrace)> {
    let (f, g) = (&problem.f, &problem.g);
    let alpha = pcfg.alpha.unwrap_or_else(|| picard_alpha(f.mu, f.kf, g.kg, g.eps));
    let eta = pcfg.eta.unwrap_or_else(|| picard_eta(g.eps));
    if !alpha.is_finite() {
        return Err(Error::Config(format!("Picard alpha must be finite, got {alpha}")));
    }
    if !(pcfg.stop_tol > 0.0) {
        return Err(Error::Config("Picard stop_tol must be positive".into()));
    }
    if pcfg.max_sweeps == 0 {
        return Err(Error::Config("Picard needs at least one sweep".into()));
    }
    let grid = noise.grid().clone();
    let n = fwd.n_paths();
    let k = noise.w_dim();
    let start = fwd.start_index();
    let weight_y = 2.0 * g.kg / (1.0 + g.eps);
    let mut prev_y = vec![0.0; grid.n_nodes() * n];
    let mut prev_z = vec![0.0; grid.n_steps() * n * k];
    let mut trace = ContractionTrace {
        alpha,
        eta,
        gaps: Vec::new(),
        weighted_gaps: Vec::new(),
        ratios: Vec::new(),
        converged: false,
        warning: None,
    };
    let mut rises = 0;
    let mut last = None;
    for _ in 0..pcfg.max_sweeps {
        let sol = backward_sweep(
            fwd,
            problem,
            noise,
            cfg,
            Sweep {
                frozen: Frozen::Previous {
                    y: &prev_y,
                    z: &prev_z,
                },
                shift: None,
            },
        )?;
        let (mut dy, mut dz) = (0.0, 0.0);
        for i in start..grid.n_steps() {
            let w = (alpha * grid.node(i)).exp() * grid.dt() / n as f64;
            let ys = &sol.y_raw()[i * n..(i + 1) * n];
            let ps = &prev_y[i * n..(i + 1) * n];
            dy += w * ys.iter().zip(ps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let zs = &sol.z_raw()[i * n * k..(i + 1) * n * k];
            let pz = &prev_z[i * n * k..(i + 1) * n * k];
            dz += w * zs.iter().zip(pz).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        let gap = dy + dz;
        if let Some(&p) = trace.gaps.last() {
            let ratio = if p > 0.0 { gap / p } else { 0.0 };
            trace.ratios.push(ratio);
            if gap > p {
                rises += 1;
            } else {
                rises = 0;
            }
        }
        trace.gaps.push(gap);
        trace.weighted_gaps.push(dz + weight_y * dy);
        // Pre-start nodes stay NaN in the solution; keep them at zero here.
        for i in start..grid.n_nodes() {
            prev_y[i * n..(i + 1) * n].copy_from_slice(&sol.y_raw()[i * n..(i + 1) * n]);
        }
        for i in start..grid.n_steps() {
            prev_z[i * n * k..(i + 1) * n * k]
                .copy_from_slice(&sol.z_raw()[i * n * k..(i + 1) * n * k]);
        }
        last = Some(sol);
        if rises >= 3 {
            trace.warning = Some(format!(
                "non-contraction: the gap grew over 3 consecutive sweeps ({:?})",
                &trace.gaps[trace.gaps.len() - 4..]
            ));
            break;
        }
        if gap < pcfg.stop_tol {
            trace.converged = true;
            break;
        }
    }
    Ok((last.expect("at least one sweep"), trace))
}
