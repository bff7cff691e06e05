//! Least-squares projection onto a finite basis of functions of the state.
//!
//! A [`Design`] is built once per time step from the state samples and then
//! fits any number of targets. Every family has a block-diagonal Gram
//! matrix (one dense block for polynomials, one block per cell for the
//! partition families), so each block is factored independently. Gram and
//! moment sums are accumulated over fixed chunks of paths and reduced in
//! chunk order, which makes the fit independent of the worker count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHUNK: usize = 4096;
const AUTO_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum BasisFamily {
    /// Tensor Legendre polynomials of total degree `<= degree` on the
    /// rescaled domain.
    Polynomial { degree: usize },
    /// Indicators of `bins` equal cells per axis.
    PiecewiseConstant { bins: usize },
    /// Affine functions on `bins` equal cells per axis.
    LocalLinear { bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Ridge {
    /// `1e-8 · tr(G) / K`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub family: BasisFamily,
    /// Per-axis `(lo, hi)`; the sample range at each step when absent.
    pub domain: Option<Vec<(f64, f64)>>,
    pub ridge: Ridge,
}

impl RegressionBasis {
    pub fn new(family: BasisFamily) -> Self {
        Self {
            family,
            domain: None,
            ridge: Ridge::Auto,
        }
    }

    pub fn constant() -> Self {
        Self::new(BasisFamily::Polynomial { degree: 0 })
    }

    pub fn polynomial(degree: usize) -> Self {
        Self::new(BasisFamily::Polynomial { degree })
    }

    pub fn piecewise_constant(bins: usize) -> Self {
        Self::new(BasisFamily::PiecewiseConstant { bins })
    }

    pub fn local_linear(bins: usize) -> Self {
        Self::new(BasisFamily::LocalLinear { bins })
    }

    pub fn with_domain(mut self, domain: Vec<(f64, f64)>) -> Self {
        self.domain = Some(domain);
        self
    }

    pub fn with_ridge(mut self, ridge: Ridge) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            BasisFamily::PiecewiseConstant { bins } | BasisFamily::LocalLinear { bins }
                if bins == 0 =>
            {
                return Err(Error::Config("basis needs at least one bin".into()))
            }
            _ => {}
        }
        if let Ridge::Fixed(l) = self.ridge {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("ridge must be finite and >= 0, got {l}")));
            }
        }
        if let Some(dom) = &self.domain {
            if dom.iter().any(|(lo, hi)| !(lo < hi)) {
                return Err(Error::Config("basis domain needs lo < hi on every axis".into()));
            }
        }
        Ok(())
    }
}

/// Maps a state `x` to its block index and the features inside the block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    family: BasisFamily,
    dim: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    // Axes with a non-degenerate range.
    active: Vec<bool>,
    // Polynomial multi-indices, intercept first.
    multi: Vec<Vec<usize>>,
    bins: Vec<usize>,
    block_size: usize,
    n_blocks: usize,
}

impl FeatureMap {
    /// `points` is row-major `n × dim`.
    pub fn new(basis: &RegressionBasis, dim: usize, points: &[f64]) -> Result<Self> {
        basis.validate()?;
        let (lo, hi) = match &basis.domain {
            Some(dom) => {
                if dom.len() != dim {
                    return Err(Error::Shape(format!(
                        "basis domain has {} axes, the state has {dim}",
                        dom.len()
                    )));
                }
                (dom.iter().map(|d| d.0).collect(), dom.iter().map(|d| d.1).collect())
            }
            None => sample_range(dim, points),
        };
        let active: Vec<bool> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h): (&f64, &f64)| h - l > 1e-12 * (1.0 + l.abs().max(h.abs())))
            .collect();
        let n_active = active.iter().filter(|a| **a).count();
        let mut map = FeatureMap {
            family: basis.family,
            dim,
            lo,
            hi,
            active: active.clone(),
            multi: Vec::new(),
            bins: vec![1; dim],
            block_size: 1,
            n_blocks: 1,
        };
        match basis.family {
            BasisFamily::Polynomial { degree } => {
                map.multi = multi_indices(dim, degree, &active);
                map.block_size = map.multi.len();
            }
            BasisFamily::PiecewiseConstant { bins } | BasisFamily::LocalLinear { bins } => {
                map.bins = active.iter().map(|a| if *a { bins } else { 1 }).collect();
                map.n_blocks = map.bins.iter().product();
                if matches!(basis.family, BasisFamily::LocalLinear { .. }) {
                    map.block_size = 1 + n_active;
                }
            }
        }
        Ok(map)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_features(&self) -> usize {
        self.block_size * self.n_blocks
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn family(&self) -> BasisFamily {
        self.family
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .enumerate()
            .all(|(k, (v, (l, h)))| !self.active[k] || (*v >= *l && *v <= *h))
    }

    fn scaled(&self, k: usize, v: f64) -> f64 {
        (2.0 * (v - self.lo[k]) / (self.hi[k] - self.lo[k]) - 1.0).clamp(-1.0, 1.0)
    }

    fn cell(&self, x: &[f64]) -> (usize, Vec<f64>) {
        let mut idx = 0;
        let mut local = Vec::with_capacity(self.dim);
        for k in 0..self.dim {
            let nb = self.bins[k];
            if !self.active[k] {
                idx *= nb;
                continue;
            }
            let w = (self.hi[k] - self.lo[k]) / nb as f64;
            let pos = (x[k] - self.lo[k]) / w;
            let b = (pos.floor().max(0.0) as usize).min(nb - 1);
            idx = idx * nb + b;
            // Offset from the cell center in half-widths, unclamped so that
            // extrapolation stays affine.
            local.push(2.0 * (pos - b as f64) - 1.0);
        }
        (idx, local)
    }

    /// Block index and features of `x`.
    pub fn features(&self, x: &[f64], out: &mut [f64]) -> usize {
        match self.family {
            BasisFamily::Polynomial { degree } => {
                let tables: Vec<Vec<f64>> = (0..self.dim)
                    .map(|k| {
                        if self.active[k] {
                            legendre(self.scaled(k, x[k]), degree)
                        } else {
                            vec![1.0]
                        }
                    })
                    .collect();
                for (o, alpha) in out.iter_mut().zip(&self.multi) {
                    *o = alpha.iter().enumerate().map(|(k, &a)| tables[k][a]).product();
                }
                0
            }
            BasisFamily::PiecewiseConstant { .. } => {
                out[0] = 1.0;
                self.cell(x).0
            }
            BasisFamily::LocalLinear { .. } => {
                let (idx, local) = self.cell(x);
                out[0] = 1.0;
                out[1..].copy_from_slice(&local);
                idx
            }
        }
    }

    /// Gradient of `x ↦ Σ coef · φ(x)`; zero for piecewise-constant.
    pub fn gradient(&self, coef: &[f64], redirect: &[usize], x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        match self.family {
            BasisFamily::Polynomial { degree } => {
                let tables: Vec<(Vec<f64>, Vec<f64>)> = (0..self.dim)
                    .map(|k| {
                        if self.active[k] {
                            legendre_with_derivative(self.scaled(k, x[k]), degree)
                        } else {
                            (vec![1.0], vec![0.0])
                        }
                    })
                    .collect();
                for (c, alpha) in coef.iter().zip(&self.multi) {
                    for (k, gk) in g.iter_mut().enumerate() {
                        if alpha[k] == 0 || !self.active[k] {
                            continue;
                        }
                        let mut term = c * tables[k].1[alpha[k]] * 2.0 / (self.hi[k] - self.lo[k]);
                        for (j, &a) in alpha.iter().enumerate() {
                            if j != k {
                                term *= tables[j].0[a];
                            }
                        }
                        *gk += term;
                    }
                }
            }
            BasisFamily::PiecewiseConstant { .. } => {}
            BasisFamily::LocalLinear { .. } => {
                let (idx, _) = self.cell(x);
                let b = redirect[idx];
                let base = b * self.block_size;
                let mut slot = 1;
                for k in 0..self.dim {
                    if self.active[k] {
                        let w = (self.hi[k] - self.lo[k]) / self.bins[k] as f64;
                        g[k] = coef[base + slot] * 2.0 / w;
                        slot += 1;
                    }
                }
            }
        }
        g
    }

    // Populated piecewise-constant cells are plain averages.
    fn intercept_unpenalized(&self) -> bool {
        matches!(self.family, BasisFamily::Polynomial { .. } | BasisFamily::PiecewiseConstant { .. })
    }
}

fn sample_range(dim: usize, points: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for row in points.chunks(dim) {
        for k in 0..dim {
            lo[k] = lo[k].min(row[k]);
            hi[k] = hi[k].max(row[k]);
        }
    }
    (lo, hi)
}

fn multi_indices(dim: usize, degree: usize, active: &[bool]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut cur = vec![0; dim];
        push_with_total(0, total, &mut cur, active, &mut out);
    }
    out
}

fn push_with_total(
    k: usize,
    left: usize,
    cur: &mut Vec<usize>,
    active: &[bool],
    out: &mut Vec<Vec<usize>>,
) {
    if k == cur.len() {
        if left == 0 {
            out.push(cur.clone());
        }
        return;
    }
    let max = if active[k] { left } else { 0 };
    for a in (0..=max).rev() {
        cur[k] = a;
        push_with_total(k + 1, left - a, cur, active, out);
    }
    cur[k] = 0;
}

fn legendre(u: f64, degree: usize) -> Vec<f64> {
    let mut p = vec![1.0; degree + 1];
    if degree >= 1 {
        p[1] = u;
    }
    for n in 1..degree {
        let nf = n as f64;
        p[n + 1] = ((2.0 * nf + 1.0) * u * p[n] - nf * p[n - 1]) / (nf + 1.0);
    }
    p
}

fn legendre_with_derivative(u: f64, degree: usize) -> (Vec<f64>, Vec<f64>) {
    let p = legendre(u, degree);
    let mut d = vec![0.0; degree + 1];
    // P'_{n+1} = P'_{n-1} + (2n + 1) P_n
    for n in 0..degree {
        let prev = if n >= 1 { d[n - 1] } else { 0.0 };
        d[n + 1] = prev + (2.0 * n as f64 + 1.0) * p[n];
    }
    (p, d)
}

/// Coefficients of one fitted target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fitted {
    pub coef: Vec<f64>,
    pub residual_rms: f64,
}

/// A fitted function of the state, usable away from the sample points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub map: FeatureMap,
    pub coef: Vec<f64>,
    // Empty cells borrow the coefficients of the nearest populated cell.
    pub redirect: Vec<usize>,
}

impl Regressor {
    pub fn value(&self, x: &[f64]) -> f64 {
        let mut f = vec![0.0; self.map.block_size];
        let b = self.redirect[self.map.features(x, &mut f)];
        let base = b * self.map.block_size;
        f.iter().zip(&self.coef[base..]).map(|(a, c)| a * c).sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.map.gradient(&self.coef, &self.redirect, x)
    }
}

/// State samples of one time step, with the factored Gram matrix.
pub struct Design {
    map: FeatureMap,
    n: usize,
    blocks: Vec<usize>,
    feats: Vec<f64>,
    counts: Vec<usize>,
    factors: Vec<Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>>,
    // Scalar blocks are divided directly, which keeps cell averages exact.
    scalar: Vec<f64>,
    redirect: Vec<usize>,
    ridge: f64,
    condition: f64,
}

impl std::fmt::Debug for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Design")
            .field("n", &self.n)
            .field("ridge", &self.ridge)
            .field("condition", &self.condition)
            .finish_non_exhaustive()
    }
}

impl Design {
    /// `points` is row-major `n × dim`. `step` only labels errors.
    pub fn new(basis: &RegressionBasis, dim: usize, points: &[f64], step: usize) -> Result<Self> {
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} state values do not form rows of length {dim}",
                points.len()
            )));
        }
        let map = FeatureMap::new(basis, dim, points)?;
        let n = points.len() / dim;
        let bs = map.block_size;
        let nb = map.n_blocks;
        let mut feats = vec![0.0; n * bs];
        let mut blocks = vec![0usize; n];
        feats
            .par_chunks_mut(bs)
            .zip(blocks.par_iter_mut())
            .enumerate()
            .for_each(|(p, (f, b))| *b = map.features(&points[p * dim..(p + 1) * dim], f));

        let partials: Vec<(Vec<f64>, Vec<usize>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut g = vec![0.0; nb * bs * bs];
                let mut counts = vec![0usize; nb];
                for p in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let b = blocks[p];
                    counts[b] += 1;
                    let f = &feats[p * bs..(p + 1) * bs];
                    let gb = &mut g[b * bs * bs..(b + 1) * bs * bs];
                    for i in 0..bs {
                        for j in 0..=i {
                            gb[i * bs + j] += f[i] * f[j];
                        }
                    }
                }
                (g, counts)
            })
            .collect();
        let mut gram = vec![0.0; nb * bs * bs];
        let mut counts = vec![0usize; nb];
        for (g, c) in &partials {
            gram.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }

        let trace: f64 = (0..nb)
            .map(|b| (0..bs).map(|i| gram[b * bs * bs + i * bs + i]).sum::<f64>())
            .sum();
        let ridge = match basis.ridge {
            Ridge::Auto => AUTO_RIDGE * trace / (nb * bs) as f64,
            Ridge::Fixed(l) => l,
        };
        let mut factors = Vec::with_capacity(nb);
        let mut scalar = vec![0.0; nb];
        let mut diag_max: f64 = 0.0;
        let mut diag_min = f64::INFINITY;
        for b in 0..nb {
            if counts[b] == 0 && ridge == 0.0 {
                return Err(Error::SingularRegression {
                    step,
                    detail: format!("cell {b} has no samples and no ridge is set"),
                });
            }
            if counts[b] == 0 {
                factors.push(None);
                continue;
            }
            if bs == 1 {
                let pen = if map.intercept_unpenalized() { 0.0 } else { ridge };
                scalar[b] = gram[b] + pen;
                diag_max = diag_max.max(scalar[b]);
                diag_min = diag_min.min(scalar[b]);
                factors.push(None);
                continue;
            }
            let mut m = DMatrix::<f64>::zeros(bs, bs);
            for i in 0..bs {
                for j in 0..=i {
                    let v = gram[b * bs * bs + i * bs + j];
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
                if !(i == 0 && map.intercept_unpenalized()) {
                    m[(i, i)] += ridge;
                }
            }
            let scale = (0..bs).map(|i| m[(i, i)]).fold(0.0, f64::max);
            let chol = m.cholesky().ok_or_else(|| Error::SingularRegression {
                step,
                detail: format!("Gram block {b} is not positive definite (ridge {ridge})"),
            })?;
            for i in 0..bs {
                let l = chol.l_dirty()[(i, i)];
                diag_max = diag_max.max(l * l);
                diag_min = diag_min.min(l * l);
            }
            if ridge == 0.0 && diag_min <= 1e-13 * scale {
                return Err(Error::SingularRegression {
                    step,
                    detail: format!("Gram block {b} is numerically rank deficient"),
                });
            }
            factors.push(Some(chol));
        }
        let redirect = nearest_populated(&map, &counts);
        Ok(Self {
            map,
            n,
            blocks,
            feats,
            counts,
            factors,
            scalar,
            redirect,
            ridge,
            condition: diag_max / diag_min,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Ratio of extreme squared pivots of the Gram factorisation, a cheap
    /// proxy for the condition number.
    pub fn condition_estimate(&self) -> f64 {
        self.condition
    }

    pub fn map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn fit(&self, target: &[f64]) -> Result<Fitted> {
        if target.len() != self.n {
            return Err(Error::Shape(format!(
                "regression target has {} values for {} samples",
                target.len(),
                self.n
            )));
        }
        let bs = self.map.block_size;
        let nb = self.map.n_blocks;
        let partials: Vec<Vec<f64>> = (0..self.n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut r = vec![0.0; nb * bs];
                for p in c * CHUNK..((c + 1) * CHUNK).min(self.n) {
                    let b = self.blocks[p];
                    let f = &self.feats[p * bs..(p + 1) * bs];
                    for i in 0..bs {
                        r[b * bs + i] += f[i] * target[p];
                    }
                }
                r
            })
            .collect();
        let mut rhs = vec![0.0; nb * bs];
        for r in &partials {
            rhs.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        let mut coef = vec![0.0; nb * bs];
        for (b, fac) in self.factors.iter().enumerate() {
            if bs == 1 {
                if self.counts[b] > 0 {
                    coef[b] = rhs[b] / self.scalar[b];
                }
            } else if let Some(chol) = fac {
                let v = chol.solve(&DVector::from_column_slice(&rhs[b * bs..(b + 1) * bs]));
                coef[b * bs..(b + 1) * bs].copy_from_slice(v.as_slice());
            }
        }
        for (b, &src) in self.redirect.iter().enumerate() {
            if src != b {
                let (from, to) = (src * bs, b * bs);
                coef.copy_within(from..from + bs, to);
            }
        }
        let pred = self.predict(&coef);
        let sse: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(Fitted {
            coef,
            residual_rms: (sse / self.n as f64).sqrt(),
        })
    }

    /// Fitted values at the sample points.
    pub fn predict(&self, coef: &[f64]) -> Vec<f64> {
        let bs = self.map.block_size;
        (0..self.n)
            .into_par_iter()
            .map(|p| {
                let base = self.blocks[p] * bs;
                self.feats[p * bs..(p + 1) * bs]
                    .iter()
                    .zip(&coef[base..base + bs])
                    .map(|(a, c)| a * c)
                    .sum()
            })
            .collect()
    }

    pub fn regressor(&self, fitted: &Fitted) -> Regressor {
        Regressor {
            map: self.map.clone(),
            coef: fitted.coef.clone(),
            redirect: self.redirect.clone(),
        }
    }
}

// For each cell, the index of the closest cell (by center, in index units)
// holding at least one sample; identity for populated cells.
fn nearest_populated(map: &FeatureMap, counts: &[usize]) -> Vec<usize> {
    let nb = map.n_blocks;
    let populated: Vec<usize> = (0..nb).filter(|&b| counts[b] > 0).collect();
    if populated.is_empty() || populated.len() == nb {
        return (0..nb).collect();
    }
    let coords = |mut b: usize| -> Vec<usize> {
        let mut c = vec![0; map.dim];
        for k in (0..map.dim).rev() {
            c[k] = b % map.bins[k];
            b /= map.bins[k];
        }
        c
    };
    (0..nb)
        .map(|b| {
            if counts[b] > 0 {
                return b;
            }
            let cb = coords(b);
            *populated
                .iter()
                .min_by_key(|&&p| {
                    coords(p)
                        .iter()
                        .zip(&cb)
                        .map(|(a, c)| (*a as i64 - *c as i64).pow(2))
                        .sum::<i64>()
                })
                .expect("non-empty")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_points(n: usize) -> Vec<f64> {
        (0..n).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / n as f64).collect()
    }

    #[test]
    fn polynomial_reproduces_polynomials() {
        let xs = grid_points(200);
        let target: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x * x).collect();
        let basis = RegressionBasis::polynomial(3).with_ridge(Ridge::Fixed(0.0));
        let d = Design::new(&basis, 1, &xs, 0).unwrap();
        let fit = d.fit(&target).unwrap();
        assert!(fit.residual_rms < 1e-12);
        let r = d.regressor(&fit);
        assert!((r.value(&[0.3]) - (1.0 - 0.6 + 0.5 * 0.027)).abs() < 1e-10);
        let g = r.gradient(&[0.3]);
        assert!((g[0] - (-2.0 + 1.5 * 0.09)).abs() < 1e-9);
    }

    #[test]
    fn constant_basis_is_the_mean() {
        let xs = grid_points(10);
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let d = Design::new(&RegressionBasis::constant(), 1, &xs, 0).unwrap();
        let fit = d.fit(&t).unwrap();
        assert!((fit.coef[0] - 4.5).abs() < 1e-14);
    }

    #[test]
    fn intercept_is_not_penalised() {
        let xs = grid_points(50);
        let d = Design::new(&RegressionBasis::polynomial(4), 1, &xs, 0).unwrap();
        assert!(d.ridge() > 0.0);
        let fit = d.fit(&vec![1.0; 50]).unwrap();
        for v in d.predict(&fit.coef) {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn piecewise_constant_is_cell_average() {
        let xs = vec![0.1, 0.2, 0.8, 0.9];
        let basis = RegressionBasis::piecewise_constant(2)
            .with_domain(vec![(0.0, 1.0)])
            .with_ridge(Ridge::Fixed(0.0));
        let d = Design::new(&basis, 1, &xs, 0).unwrap();
        let fit = d.fit(&[1.0, 3.0, 10.0, 20.0]).unwrap();
        assert_eq!(fit.coef, vec![2.0, 15.0]);
        assert_eq!(d.regressor(&fit).gradient(&[0.5]), vec![0.0]);
    }

    #[test]
    fn empty_cells_borrow_neighbours() {
        let xs = vec![0.05, 0.1, 0.9];
        let basis = RegressionBasis::piecewise_constant(4).with_domain(vec![(0.0, 1.0)]);
        let d = Design::new(&basis, 1, &xs, 0).unwrap();
        let r = d.regressor(&d.fit(&[1.0, 1.0, 5.0]).unwrap());
        assert!((r.value(&[0.3]) - 1.0).abs() < 1e-6);
        assert!((r.value(&[0.6]) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn empty_cell_without_ridge_is_singular() {
        let xs = vec![0.05, 0.1, 0.9];
        let basis = RegressionBasis::piecewise_constant(4)
            .with_domain(vec![(0.0, 1.0)])
            .with_ridge(Ridge::Fixed(0.0));
        assert!(matches!(
            Design::new(&basis, 1, &xs, 7),
            Err(Error::SingularRegression { step: 7, .. })
        ));
    }

    #[test]
    fn rank_deficient_polynomial_without_ridge() {
        // Two distinct points cannot identify a quadratic.
        let xs = vec![0.0, 0.0, 1.0, 1.0];
        let basis = RegressionBasis::polynomial(2).with_ridge(Ridge::Fixed(0.0));
        assert!(matches!(
            Design::new(&basis, 1, &xs, 3),
            Err(Error::SingularRegression { .. })
        ));
        assert!(Design::new(&RegressionBasis::polynomial(2), 1, &xs, 3).is_ok());
    }

    #[test]
    fn degenerate_axis_drops_to_constants() {
        let xs = vec![0.5; 6];
        let basis = RegressionBasis::polynomial(3).with_ridge(Ridge::Fixed(0.0));
        let d = Design::new(&basis, 1, &xs, 0).unwrap();
        let fit = d.fit(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(fit.coef.len(), 1);
        assert!((fit.coef[0] - 3.5).abs() < 1e-14);
    }

    #[test]
    fn local_linear_reproduces_affine_and_gradient() {
        let xs = grid_points(400);
        let t: Vec<f64> = xs.iter().map(|x| 2.0 + 3.0 * x).collect();
        let d = Design::new(&RegressionBasis::local_linear(8), 1, &xs, 0).unwrap();
        let fit = d.fit(&t).unwrap();
        assert!(fit.residual_rms < 1e-6);
        let r = d.regressor(&fit);
        assert!((r.value(&[0.33]) - 2.99).abs() < 1e-6);
        assert!((r.gradient(&[0.33])[0] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn two_dimensional_polynomial() {
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                pts.push(i as f64 / 19.0);
                pts.push(j as f64 / 19.0 - 0.5);
            }
        }
        let t: Vec<f64> = pts.chunks(2).map(|p| p[0] * p[1] + p[1]).collect();
        let basis = RegressionBasis::polynomial(2).with_ridge(Ridge::Fixed(0.0));
        let d = Design::new(&basis, 2, &pts, 0).unwrap();
        let r = d.regressor(&d.fit(&t).unwrap());
        assert!((r.value(&[0.4, 0.2]) - 0.28).abs() < 1e-10);
        let g = r.gradient(&[0.4, 0.2]);
        assert!((g[0] - 0.2).abs() < 1e-9 && (g[1] - 1.4).abs() < 1e-9);
    }

    #[test]
    fn fit_is_independent_of_thread_count() {
        let xs: Vec<f64> = (0..20_000).map(|i| ((i * 7919) % 10007) as f64 / 10007.0).collect();
        let t: Vec<f64> = xs.iter().map(|x| (5.0 * x).sin()).collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    let d = Design::new(&RegressionBasis::polynomial(5), 1, &xs, 0).unwrap();
                    d.fit(&t).unwrap().coef
                })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn legendre_derivatives() {
        let (p, d) = legendre_with_derivative(0.3, 4);
        let h = 1e-6;
        let up = legendre(0.3 + h, 4);
        let down = legendre(0.3 - h, 4);
        for k in 0..=4 {
            assert!(((up[k] - down[k]) / (2.0 * h) - d[k]).abs() < 1e-8);
        }
        assert!((p[2] - 0.5 * (3.0 * 0.09 - 1.0)).abs() < 1e-15);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn projection_is_linear(a in -5.0f64..5.0, seed in 0u64..100) {
            let xs: Vec<f64> = (0..300).map(|i| (((i as u64 * 2654435761 + seed) % 1000) as f64) / 1000.0).collect();
            let t1: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
            let t2: Vec<f64> = xs.iter().map(|x| (3.0 * x).cos()).collect();
            let mix: Vec<f64> = t1.iter().zip(&t2).map(|(u, v)| a * u + v).collect();
            let d = Design::new(&RegressionBasis::polynomial(3), 1, &xs, 0).unwrap();
            let f1 = d.fit(&t1).unwrap();
            let f2 = d.fit(&t2).unwrap();
            let fm = d.fit(&mix).unwrap();
            for k in 0..fm.coef.len() {
                prop_assert!((fm.coef[k] - a * f1.coef[k] - f2.coef[k]).abs() < 1e-8);
            }
        }

        #[test]
        fn piecewise_constant_preserves_order(seed in 0u64..100, shift in 0.0f64..2.0) {
            let xs: Vec<f64> = (0..200).map(|i| (((i as u64 * 40503 + seed) % 997) as f64) / 997.0).collect();
            let t1: Vec<f64> = xs.iter().map(|x| (7.0 * x).sin()).collect();
            let t2: Vec<f64> = t1.iter().zip(&xs).map(|(v, x)| v + shift * x).collect();
            let d = Design::new(&RegressionBasis::piecewise_constant(8), 1, &xs, 0).unwrap();
            let p1 = d.predict(&d.fit(&t1).unwrap().coef);
            let p2 = d.predict(&d.fit(&t2).unwrap().coef);
            for (u, v) in p1.iter().zip(&p2) {
                prop_assert!(u <= &(v + 1e-12));
            }
        }
    }
}
