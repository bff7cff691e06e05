use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform partition `t_0 < t_1 < ... < t_N` of `[t_start, t_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(Error::Config(format!(
                "time grid needs finite t_start < t_end, got [{t_start}, {t_end}]"
            )));
        }
        let dt = (t_end - t_start) / n_steps as f64;
        let mut nodes: Vec<f64> = (0..=n_steps).map(|i| t_start + i as f64 * dt).collect();
        nodes[n_steps] = t_end;
        Ok(Self {
            t_start,
            t_end,
            n_steps,
            nodes,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    /// Terminal time `T`.
    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// Index of the node equal to `t` up to a small fraction of the step.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let pos = (t - self.t_start) / self.dt();
        let i = pos.round();
        if i < 0.0 || i > self.n_steps as f64 || (pos - i).abs() > 1e-9 {
            return None;
        }
        Some(i as usize)
    }

    /// Largest node index `i` with `t_i <= t`.
    pub fn floor_index(&self, t: f64) -> usize {
        let pos = ((t - self.t_start) / self.dt() + 1e-9).floor();
        pos.clamp(0.0, self.n_steps as f64) as usize
    }

    /// Grid with `factor` fewer steps and the same end points.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(Error::Config(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.n_steps
            )));
        }
        Self::uniform(self.t_start, self.t_end, self.n_steps / factor)
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps && self.t_start == other.t_start && self.t_end == other.t_end
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_hit_end_points() {
        let g = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(3), 1.0);
        assert!(g.nodes().windows(2).all(|w| w[0] < w[1]));
        assert!((g.dt() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_zero_steps_and_empty_interval() {
        assert!(TimeGrid::uniform(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::uniform(1.0, 1.0, 4).is_err());
    }

    #[test]
    fn index_lookup() {
        let g = TimeGrid::uniform(0.0, 1.0, 4).unwrap();
        assert_eq!(g.index_of(0.5), Some(2));
        assert_eq!(g.index_of(0.3), None);
        assert_eq!(g.floor_index(0.3), 1);
        assert_eq!(g.floor_index(1.0), 4);
    }
}
