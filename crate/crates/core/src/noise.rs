//! The two independent Brownian motions of the backward doubly stochastic
//! equation and the forward/backward Itô sums over a shared time grid.
//!
//! Every forward path `W^p` draws from its own ChaCha stream `p`, and the
//! backward noise `B` draws from streams in the upper half of the stream
//! space. Paths are therefore reproducible one by one, whatever the number
//! of worker threads, and `W`, `B` never share random numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

const B_STREAM_BASE: u64 = 1 << 63;

/// Identifies the random inputs of a run, used to check that two solutions
/// were computed on coupled noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseId {
    pub seed: u64,
    pub b_index: u64,
    pub n_paths: usize,
    pub n_steps: usize,
}

/// `n_paths` forward Brownian paths `W` in `R^d` and one backward Brownian
/// path `B` in `R^m`, shared by every `W` path.
#[derive(Debug, Clone)]
pub struct DualBrownianPaths {
    grid: TimeGrid,
    w_dim: usize,
    b_dim: usize,
    n_paths: usize,
    seed: u64,
    b_index: u64,
    // path-major: [path][node][component]
    w: Vec<f64>,
    // [node][component]
    b: Vec<f64>,
}

/// Samples the forward paths and backward path number 0 for `seed`.
pub fn sample_paths(
    grid: &TimeGrid,
    d: usize,
    m: usize,
    n_paths: usize,
    seed: u64,
) -> Result<DualBrownianPaths> {
    sample_paths_with_b(grid, d, m, n_paths, seed, 0)
}

/// As [`sample_paths`], with an explicit realisation index for `B`. Runs that
/// share `seed` share their `W` paths, whatever `b_index` is.
pub fn sample_paths_with_b(
    grid: &TimeGrid,
    d: usize,
    m: usize,
    n_paths: usize,
    seed: u64,
    b_index: u64,
) -> Result<DualBrownianPaths> {
    if n_paths == 0 {
        return Err(Error::Config("need at least one forward path".into()));
    }
    if d == 0 || m == 0 {
        return Err(Error::Config(format!(
            "noise dimensions must be positive, got d={d}, m={m}"
        )));
    }
    if b_index >= B_STREAM_BASE {
        return Err(Error::Config("B realisation index out of range".into()));
    }
    let n_nodes = grid.n_nodes();
    let sqrt_dt = grid.dt().sqrt();
    let mut w = vec![0.0; n_paths * n_nodes * d];
    w.par_chunks_mut(n_nodes * d)
        .enumerate()
        .for_each(|(p, path)| fill_brownian(path, d, sqrt_dt, seed, p as u64));
    let mut b = vec![0.0; n_nodes * m];
    fill_brownian(&mut b, m, sqrt_dt, seed, B_STREAM_BASE + b_index);
    Ok(DualBrownianPaths {
        grid: grid.clone(),
        w_dim: d,
        b_dim: m,
        n_paths,
        seed,
        b_index,
        w,
        b,
    })
}

fn fill_brownian(out: &mut [f64], dim: usize, sqrt_dt: f64, seed: u64, stream: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n_nodes = out.len() / dim;
    for i in 1..n_nodes {
        for k in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            out[i * dim + k] = out[(i - 1) * dim + k] + sqrt_dt * z;
        }
    }
}

impl DualBrownianPaths {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn w_dim(&self) -> usize {
        self.w_dim
    }

    pub fn b_dim(&self) -> usize {
        self.b_dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn b_index(&self) -> u64 {
        self.b_index
    }

    pub fn id(&self) -> NoiseId {
        NoiseId {
            seed: self.seed,
            b_index: self.b_index,
            n_paths: self.n_paths,
            n_steps: self.grid.n_steps(),
        }
    }

    /// `W^p_{t_i}`.
    pub fn w(&self, path: usize, node: usize) -> &[f64] {
        let n = self.grid.n_nodes();
        let start = (path * n + node) * self.w_dim;
        &self.w[start..start + self.w_dim]
    }

    /// `B_{t_i}`.
    pub fn b(&self, node: usize) -> &[f64] {
        &self.b[node * self.b_dim..(node + 1) * self.b_dim]
    }

    /// Increment `W^p_{t_{i+1}} - W^p_{t_i}` of component `k`.
    pub fn dw(&self, path: usize, step: usize, k: usize) -> f64 {
        self.w(path, step + 1)[k] - self.w(path, step)[k]
    }

    /// Increment `B_{t_{i+1}} - B_{t_i}` of component `k`.
    pub fn db(&self, step: usize, k: usize) -> f64 {
        self.b(step + 1)[k] - self.b(step)[k]
    }

    /// All increments of component `k` of `W^p`, one per step.
    pub fn dw_series(&self, path: usize, k: usize) -> Vec<f64> {
        (0..self.grid.n_steps()).map(|i| self.dw(path, i, k)).collect()
    }

    /// All increments of component `k` of `B`, one per step.
    pub fn db_series(&self, k: usize) -> Vec<f64> {
        (0..self.grid.n_steps()).map(|i| self.db(i, k)).collect()
    }

    /// Same Brownian motions observed on every `factor`-th node.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let n_fine = self.grid.n_nodes();
        let n_coarse = grid.n_nodes();
        let mut w = Vec::with_capacity(self.n_paths * n_coarse * self.w_dim);
        for p in 0..self.n_paths {
            for i in 0..n_coarse {
                let start = (p * n_fine + i * factor) * self.w_dim;
                w.extend_from_slice(&self.w[start..start + self.w_dim]);
            }
        }
        let mut b = Vec::with_capacity(n_coarse * self.b_dim);
        for i in 0..n_coarse {
            b.extend_from_slice(self.b(i * factor));
        }
        Ok(Self {
            grid,
            w,
            b,
            ..self.clone_header()
        })
    }

    /// Same noise with `W` paths reordered: path `j` of the result is path
    /// `order[j]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n_paths {
            return Err(Error::Shape(format!(
                "permutation has {} entries for {} paths",
                order.len(),
                self.n_paths
            )));
        }
        let stride = self.grid.n_nodes() * self.w_dim;
        let mut w = Vec::with_capacity(self.w.len());
        for &p in order {
            if p >= self.n_paths {
                return Err(Error::Shape(format!("path index {p} out of range")));
            }
            w.extend_from_slice(&self.w[p * stride..(p + 1) * stride]);
        }
        Ok(Self {
            grid: self.grid.clone(),
            w,
            b: self.b.clone(),
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            w_dim: self.w_dim,
            b_dim: self.b_dim,
            n_paths: self.n_paths,
            seed: self.seed,
            b_index: self.b_index,
            w: Vec::new(),
            b: Vec::new(),
        }
    }
}

/// Left-endpoint sum `sum_i a(t_i) dW_i`.
pub fn forward_ito(integrand: &[f64], dw: &[f64]) -> Result<f64> {
    if integrand.len() != dw.len() {
        return Err(Error::Shape(format!(
            "forward Itô sum: {} integrand values for {} increments",
            integrand.len(),
            dw.len()
        )));
    }
    Ok(integrand.iter().zip(dw).map(|(a, d)| a * d).sum())
}

/// Right-endpoint sum `sum_i a(t_{i+1}) dB_i`, the discretisation of the
/// backward Itô integral. `integrand[i]` is the value at `t_{i+1}`.
pub fn backward_ito(integrand: &[f64], db: &[f64]) -> Result<f64> {
    if integrand.len() != db.len() {
        return Err(Error::Shape(format!(
            "backward Itô sum: {} integrand values for {} increments",
            integrand.len(),
            db.len()
        )));
    }
    Ok(integrand.iter().zip(db).map(|(a, d)| a * d).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::uniform(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn same_seed_same_paths() {
        let g = grid(1);
        let a = sample_paths(&g, 1, 1, 1, 11).unwrap();
        let b = sample_paths(&g, 1, 1, 1, 11).unwrap();
        assert_eq!(a.w, b.w);
        assert_eq!(a.b, b.b);
        let c = sample_paths(&g, 1, 1, 1, 12).unwrap();
        assert_ne!(a.w, c.w);
    }

    #[test]
    fn paths_start_at_zero() {
        let n = sample_paths(&grid(8), 2, 3, 5, 1).unwrap();
        for p in 0..5 {
            assert_eq!(n.w(p, 0), &[0.0, 0.0]);
        }
        assert_eq!(n.b(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_paths_or_steps_rejected() {
        assert!(sample_paths(&grid(4), 1, 1, 0, 0).is_err());
        assert!(sample_paths(&grid(4), 0, 1, 3, 0).is_err());
        assert!(TimeGrid::uniform(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn path_does_not_depend_on_path_count() {
        let g = grid(16);
        let small = sample_paths(&g, 1, 1, 3, 5).unwrap();
        let large = sample_paths(&g, 1, 1, 300, 5).unwrap();
        for i in 0..=16 {
            assert_eq!(small.w(2, i), large.w(2, i));
        }
        assert_eq!(small.b, large.b);
    }

    #[test]
    fn b_realisations_differ_but_w_is_shared() {
        let g = grid(16);
        let a = sample_paths_with_b(&g, 1, 1, 4, 5, 0).unwrap();
        let b = sample_paths_with_b(&g, 1, 1, 4, 5, 1).unwrap();
        assert_eq!(a.w, b.w);
        assert_ne!(a.b, b.b);
    }

    #[test]
    fn increment_variance_matches_dt() {
        // 10^5 draws of N(0, dt): the sample variance has standard error
        // dt * sqrt(2 / (n - 1)).
        let g = grid(10);
        let n = sample_paths(&g, 1, 1, 10_000, 3).unwrap();
        let dt = g.dt();
        let incs: Vec<f64> = (0..n.n_paths())
            .flat_map(|p| (0..10).map(move |i| (p, i)))
            .map(|(p, i)| n.dw(p, i, 0))
            .collect();
        let count = incs.len() as f64;
        let mean = incs.iter().sum::<f64>() / count;
        let var = incs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1.0);
        let se = dt * (2.0 / (count - 1.0)).sqrt();
        assert!((var - dt).abs() < 3.0 * se, "var {var} vs dt {dt}");
    }

    #[test]
    fn w_and_b_increments_uncorrelated() {
        // Pair each path's W increment with B increments of independent
        // realisations; the sample correlation has standard error 1/sqrt(n).
        let g = grid(4);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for r in 0..2_500u64 {
            let n = sample_paths_with_b(&g, 1, 1, 10, 9, r).unwrap();
            for i in 0..4 {
                xs.push(n.dw((r % 10) as usize, i, 0));
                ys.push(n.db(i, 0));
            }
        }
        let c = crate::stats::correlation(&xs, &ys);
        let se = 1.0 / (xs.len() as f64).sqrt();
        assert!(c.abs() < 3.0 * se, "corr {c}");
    }

    #[test]
    fn ito_sums_on_trivial_integrands() {
        let g = grid(32);
        let n = sample_paths(&g, 1, 1, 1, 4).unwrap();
        let dw = n.dw_series(0, 0);
        let db = n.db_series(0);
        assert_eq!(forward_ito(&vec![0.0; 32], &dw).unwrap(), 0.0);
        assert_eq!(backward_ito(&vec![0.0; 32], &db).unwrap(), 0.0);
        let fw = forward_ito(&vec![1.0; 32], &dw).unwrap();
        assert!((fw - n.w(0, 32)[0]).abs() < 1e-12);
        // Backward sum of 1 over [t_8, T] is B_T - B_{t_8}.
        let bw = backward_ito(&vec![1.0; 24], &db[8..]).unwrap();
        assert!((bw - (n.b(32)[0] - n.b(8)[0])).abs() < 1e-12);
        assert!(forward_ito(&[1.0], &dw).is_err());
        assert!(backward_ito(&[1.0, 2.0], &db).is_err());
    }

    #[test]
    fn forward_integral_of_w_approaches_ito_value() {
        // sum W_{t_i} dW_i = (W_T^2 - sum dW_i^2) / 2 exactly; the gap to the
        // Itô value (W_T^2 - T) / 2 is half the quadratic-variation error,
        // whose L2 norm is sqrt(2 T dt) / 2.
        let mut errs = Vec::new();
        for &n_steps in &[64usize, 256, 1024] {
            let g = grid(n_steps);
            let n = sample_paths(&g, 1, 1, 200, 8).unwrap();
            let mut ms = 0.0;
            for p in 0..200 {
                let w: Vec<f64> = (0..n_steps).map(|i| n.w(p, i)[0]).collect();
                let v = forward_ito(&w, &n.dw_series(p, 0)).unwrap();
                let wt = n.w(p, n_steps)[0];
                ms += (v - 0.5 * (wt * wt - 1.0)).powi(2);
            }
            errs.push((ms / 200.0).sqrt());
        }
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
        let expected = (2.0f64 / 1024.0).sqrt() / 2.0;
        assert!(errs[2] < 2.0 * expected);
    }

    #[test]
    fn backward_minus_forward_is_quadratic_variation() {
        let g = grid(4096);
        let n = sample_paths(&g, 1, 1, 1, 21).unwrap();
        let db = n.db_series(0);
        let left: Vec<f64> = (0..4096).map(|i| n.b(i)[0]).collect();
        let right: Vec<f64> = (1..=4096).map(|i| n.b(i)[0]).collect();
        let gap = backward_ito(&right, &db).unwrap() - forward_ito(&left, &db).unwrap();
        let qv: f64 = db.iter().map(|d| d * d).sum();
        assert!((gap - qv).abs() < 1e-10);
        // Var of the quadratic variation is 2 T dt.
        assert!((qv - 1.0).abs() < 3.0 * (2.0f64 / 4096.0).sqrt());
    }

    #[test]
    fn smooth_integrand_forward_backward_gap_is_first_order() {
        // integrand g(t) = t: the gap is sum dt * dB_i, its L2 norm is dt.
        for &n_steps in &[64usize, 512] {
            let g = grid(n_steps);
            let n = sample_paths(&g, 1, 1, 1, 2).unwrap();
            let db = n.db_series(0);
            let left: Vec<f64> = g.nodes()[..n_steps].to_vec();
            let right: Vec<f64> = g.nodes()[1..].to_vec();
            let gap = backward_ito(&right, &db).unwrap() - forward_ito(&left, &db).unwrap();
            assert!(gap.abs() < 4.0 * g.dt());
        }
    }

    #[test]
    fn coarsened_paths_subsample_nodes() {
        let g = grid(8);
        let n = sample_paths(&g, 1, 1, 3, 1).unwrap();
        let c = n.coarsen(4).unwrap();
        assert_eq!(c.grid().n_steps(), 2);
        assert_eq!(c.w(1, 1), n.w(1, 4));
        assert_eq!(c.b(2), n.b(8));
        assert!(n.coarsen(3).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn integrals_split_at_grid_nodes(split in 1usize..31, seed in 0u64..1000) {
            let g = TimeGrid::uniform(0.0, 1.0, 32).unwrap();
            let n = sample_paths(&g, 1, 1, 1, seed).unwrap();
            let db = n.db_series(0);
            let dw = n.dw_series(0, 0);
            let a: Vec<f64> = g.nodes()[1..].iter().map(|t| t.sin()).collect();
            let whole = backward_ito(&a, &db).unwrap();
            let parts = backward_ito(&a[..split], &db[..split]).unwrap()
                + backward_ito(&a[split..], &db[split..]).unwrap();
            prop_assert!((whole - parts).abs() < 1e-13);
            let l: Vec<f64> = g.nodes()[..32].iter().map(|t| t.cos()).collect();
            let whole = forward_ito(&l, &dw).unwrap();
            let parts = forward_ito(&l[..split], &dw[..split]).unwrap()
                + forward_ito(&l[split..], &dw[split..]).unwrap();
            prop_assert!((whole - parts).abs() < 1e-13);
        }
    }
}
