//! Generator `f`, noise coefficient `g` and terminal condition `ξ = h(X_T)`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// `f(t, x, y, z)`.
pub type ScalarDriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
/// `g(t, x, y, z, out)`, writes `m` components.
pub type VectorDriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64], &mut [f64]) + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type SetPredicate = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum GeneratorKind {
    Lipschitz,
    Monotone,
    /// `f(y) = -y |y|^q`
    PowerLaw { q: f64 },
}

#[derive(Clone)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub mu: f64,
    pub kf: f64,
    pub cf: f64,
    pub growth_p: f64,
    f: ScalarDriverFn,
    dfdy: Option<ScalarDriverFn>,
}

impl fmt::Debug for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorSpec")
            .field("kind", &self.kind)
            .field("mu", &self.mu)
            .field("kf", &self.kf)
            .field("cf", &self.cf)
            .field("growth_p", &self.growth_p)
            .finish_non_exhaustive()
    }
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind, mu: f64, kf: f64, f: ScalarDriverFn) -> Result<Self> {
        for (name, v) in [("mu", mu), ("kf", kf)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("generator constant {name} must be finite")));
            }
        }
        if kf < 0.0 {
            return Err(Error::Config("kf must be non-negative".into()));
        }
        Ok(Self {
            kind,
            mu,
            kf,
            cf: f64::INFINITY,
            growth_p: 1.0,
            f,
            dfdy: None,
        })
    }

    /// `f(y) = -y |y|^q` with `μ = 0`, `K_f = 0`, `C_f = 1`, `p = q + 1`.
    pub fn power_law(q: f64) -> Result<Self> {
        if !(q > 0.0 && q.is_finite()) {
            return Err(Error::Config(format!("power-law exponent must be positive, got {q}")));
        }
        Ok(Self {
            kind: GeneratorKind::PowerLaw { q },
            mu: 0.0,
            kf: 0.0,
            cf: 1.0,
            growth_p: q + 1.0,
            f: Arc::new(move |_, _, y, _| -y * y.abs().powf(q)),
            dfdy: Some(Arc::new(move |_, _, y, _| -(q + 1.0) * y.abs().powf(q))),
        })
    }

    /// `f(y, z) = a y + b · z + c`.
    pub fn linear(a: f64, b: Vec<f64>, c: f64) -> Result<Self> {
        let kf = b.iter().map(|v| v * v).sum::<f64>();
        let bb = b.clone();
        let mut s = Self::new(
            GeneratorKind::Lipschitz,
            a.max(0.0),
            kf,
            Arc::new(move |_, _, y, z: &[f64]| {
                a * y + bb.iter().zip(z).map(|(u, v)| u * v).sum::<f64>() + c
            }),
        )?;
        s.cf = a.abs().max(c.abs()).max(1.0);
        s.growth_p = 1.0;
        s.dfdy = Some(Arc::new(move |_, _, _, _| a));
        Ok(s)
    }

    pub fn zero() -> Self {
        let mut s = Self::linear(0.0, Vec::new(), 0.0).expect("zero generator");
        s.mu = 0.0;
        s
    }

    pub fn with_dfdy(mut self, dfdy: ScalarDriverFn) -> Self {
        self.dfdy = Some(dfdy);
        self
    }

    pub fn with_growth(mut self, cf: f64, p: f64) -> Self {
        self.cf = cf;
        self.growth_p = p;
        self
    }

    pub fn power_q(&self) -> Option<f64> {
        match self.kind {
            GeneratorKind::PowerLaw { q } => Some(q),
            _ => None,
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        (self.f)(t, x, y, z)
    }

    /// `∂f/∂y` in closed form when known, else a central difference.
    pub fn dfdy(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        match &self.dfdy {
            Some(d) => d(t, x, y, z),
            None => {
                let h = 1e-6 * y.abs().max(1.0);
                (self.eval(t, x, y + h, z) - self.eval(t, x, y - h, z)) / (2.0 * h)
            }
        }
    }
}

#[derive(Clone)]
pub struct NoiseCoefficientSpec {
    pub m: usize,
    pub kg: f64,
    pub eps: f64,
    pub z_free: bool,
    pub y_free: bool,
    /// `g` does not depend on the state `x`.
    pub x_free: bool,
    pub vanishing_at_zero: bool,
    /// (A6): `|g(t,x,y,z) - g(t,x',y,z)| ≤ K_g |x - x'|` claimed.
    pub x_lipschitz: bool,
    g: VectorDriverFn,
}

impl fmt::Debug for NoiseCoefficientSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NoiseCoefficientSpec")
            .field("m", &self.m)
            .field("kg", &self.kg)
            .field("eps", &self.eps)
            .field("z_free", &self.z_free)
            .field("y_free", &self.y_free)
            .field("x_free", &self.x_free)
            .field("vanishing_at_zero", &self.vanishing_at_zero)
            .finish_non_exhaustive()
    }
}

impl NoiseCoefficientSpec {
    pub fn new(m: usize, kg: f64, eps: f64, g: VectorDriverFn) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("g needs at least one component".into()));
        }
        if !(kg.is_finite() && kg >= 0.0) {
            return Err(Error::Config(format!("kg must be finite and non-negative, got {kg}")));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Config(format!("eps must lie in [0, 1), got {eps}")));
        }
        Ok(Self {
            m,
            kg,
            eps,
            z_free: false,
            y_free: false,
            x_free: false,
            vanishing_at_zero: false,
            x_lipschitz: false,
            g,
        })
    }

    pub fn zero(m: usize) -> Self {
        let mut s = Self::new(m, 0.0, 0.0, Arc::new(|_, _, _, _, o: &mut [f64]| o.fill(0.0)))
            .expect("zero noise coefficient");
        s.z_free = true;
        s.y_free = true;
        s.x_free = true;
        s.vanishing_at_zero = true;
        s.x_lipschitz = true;
        s
    }

    /// `g = c` in every component.
    pub fn constant(m: usize, c: f64) -> Self {
        Self::of_time(m, move |_, o| o.fill(c))
    }

    /// `g = g(t)`, independent of the state.
    pub fn of_time(m: usize, g: impl Fn(f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        let mut s = Self::new(m, 0.0, 0.0, Arc::new(move |t, _, _, _, o: &mut [f64]| g(t, o)))
            .expect("time-only noise coefficient");
        s.z_free = true;
        s.y_free = true;
        s.x_free = true;
        s.x_lipschitz = true;
        s
    }

    /// Scalar `g(y, z) = a y + b · z`, with the sharp constants.
    pub fn linear(a: f64, b: Vec<f64>) -> Result<Self> {
        let eps = b.iter().map(|v| v * v).sum::<f64>();
        let z_free = b.iter().all(|v| *v == 0.0);
        let mut s = Self::new(
            1,
            a * a,
            eps,
            Arc::new(move |_, _, y, z: &[f64], o: &mut [f64]| {
                o[0] = a * y + b.iter().zip(z).map(|(u, v)| u * v).sum::<f64>()
            }),
        )?;
        s.z_free = z_free;
        s.y_free = a == 0.0;
        s.x_free = true;
        s.vanishing_at_zero = a == 0.0;
        s.x_lipschitz = true;
        Ok(s)
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], out: &mut [f64]) {
        (self.g)(t, x, y, z, out)
    }

    /// True when `g` depends on `t` only.
    pub fn state_free(&self) -> bool {
        self.z_free && self.y_free && self.x_free
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TerminalKind {
    Bounded,
    Singular,
}

#[derive(Clone)]
pub struct TerminalCondition {
    pub kind: TerminalKind,
    h: TerminalFn,
    in_s: Option<SetPredicate>,
    dist_s: Option<TerminalFn>,
    /// (H3) claimed.
    pub lipschitz_on_sublevels: bool,
    cap: f64,
    floor: f64,
    sup: Option<f64>,
}

impl fmt::Debug for TerminalCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalCondition")
            .field("kind", &self.kind)
            .field("cap", &self.cap)
            .field("floor", &self.floor)
            .field("sup", &self.sup)
            .finish_non_exhaustive()
    }
}

impl TerminalCondition {
    /// Bounded `h` with a declared `sup h`.
    pub fn bounded(h: TerminalFn, sup: f64) -> Result<Self> {
        if !sup.is_finite() {
            return Err(Error::Config("bounded terminal needs a finite sup".into()));
        }
        Ok(Self {
            kind: TerminalKind::Bounded,
            h,
            in_s: None,
            dist_s: None,
            lipschitz_on_sublevels: true,
            cap: f64::INFINITY,
            floor: f64::NEG_INFINITY,
            sup: Some(sup),
        })
    }

    /// Finite-valued `h` without a declared bound, e.g. `h(x) = x`.
    pub fn regular(h: TerminalFn) -> Self {
        Self {
            kind: TerminalKind::Bounded,
            h,
            in_s: None,
            dist_s: None,
            lipschitz_on_sublevels: true,
            cap: f64::INFINITY,
            floor: f64::NEG_INFINITY,
            sup: None,
        }
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::bounded(Arc::new(move |_| c), c)
    }

    /// Non-negative `h` with values in `[0, +∞]`. `S = {h = +∞}` unless a
    /// predicate is supplied.
    pub fn singular(h: TerminalFn) -> Self {
        Self {
            kind: TerminalKind::Singular,
            h,
            in_s: None,
            dist_s: None,
            lipschitz_on_sublevels: false,
            cap: f64::INFINITY,
            floor: f64::NEG_INFINITY,
            sup: None,
        }
    }

    pub fn with_singular_set(mut self, in_s: SetPredicate, dist_s: Option<TerminalFn>) -> Self {
        self.in_s = Some(in_s);
        self.dist_s = dist_s;
        self
    }

    pub fn with_lipschitz_on_sublevels(mut self, claimed: bool) -> Self {
        self.lipschitz_on_sublevels = claimed;
        self
    }

    /// `h ∧ n`.
    pub fn truncate(&self, n: f64) -> Self {
        let mut t = self.clone();
        t.kind = TerminalKind::Bounded;
        t.cap = self.cap.min(n);
        t.sup = Some(self.sup.map_or(t.cap, |s| s.min(t.cap)).max(self.floor));
        t
    }

    /// `(h ∧ n) ∨ (1/m)`.
    pub fn floor(&self, n: f64, m: f64) -> Self {
        let mut t = self.truncate(n);
        t.floor = 1.0 / m;
        t.sup = t.sup.map(|s| s.max(t.floor));
        t
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.h)(x).min(self.cap).max(self.floor)
    }

    /// The untruncated `h(x)`.
    pub fn raw(&self, x: &[f64]) -> f64 {
        (self.h)(x)
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn sup(&self) -> Option<f64> {
        self.sup
    }

    pub fn in_singular_set(&self, x: &[f64]) -> bool {
        match &self.in_s {
            Some(p) => p(x),
            None => (self.h)(x) == f64::INFINITY,
        }
    }

    pub fn dist_to_singular_set(&self, x: &[f64]) -> Option<f64> {
        self.dist_s.as_ref().map(|d| d(x))
    }

    pub fn has_distance(&self) -> bool {
        self.dist_s.is_some()
    }
}

/// Outcome of one probed assumption.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    /// Largest `lhs - rhs` seen.
    pub worst_excess: f64,
    pub witness: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub probes: usize,
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

struct Tracker {
    name: &'static str,
    worst: f64,
    witness: Option<String>,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            worst: f64::NEG_INFINITY,
            witness: None,
        }
    }

    fn record(&mut self, lhs: f64, rhs: f64, witness: impl FnOnce() -> String) {
        let excess = lhs - rhs;
        if excess > self.worst {
            self.worst = excess;
            if excess > 1e-12 * (1.0 + lhs.abs().max(rhs.abs())) {
                self.witness = Some(witness());
            }
        }
    }

    fn finish(self) -> AssumptionCheck {
        AssumptionCheck {
            name: self.name.into(),
            passed: self.witness.is_none(),
            worst_excess: self.worst,
            witness: self.witness,
        }
    }
}

fn finite(v: f64, what: &str, args: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(format!("{what} is {v} at {}", args())))
    }
}

/// Falsification check of the structural assumptions on `(f, g)` over
/// standard-normal probes plus the boundary cases `y = y'`, `z = z'`.
pub fn validate_assumptions(
    f: &GeneratorSpec,
    g: &NoiseCoefficientSpec,
    x_dim: usize,
    z_dim: usize,
    probes: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if probes == 0 {
        return Err(Error::Config("need at least one probe".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    };
    let mut a1 = Tracker::new("A1");
    let mut a2 = Tracker::new("A2");
    let mut a3 = Tracker::new("A3");
    let mut a4 = Tracker::new("A4");
    let mut vanish = Tracker::new("g_vanishing_at_zero");
    let mut free = Tracker::new("g_declared_independence");
    let mut a6 = Tracker::new("A6");
    let m = g.m;
    let mut g1 = vec![0.0; m];
    let mut g2 = vec![0.0; m];
    let zero_z = vec![0.0; z_dim];
    let fmt_args = |t: f64, x: &[f64], y: f64, z: &[f64]| format!("t={t}, x={x:?}, y={y}, z={z:?}");
    for k in 0..probes + 3 {
        let t: f64 = rng.random();
        let x = normal(x_dim, &mut rng);
        let x2 = normal(x_dim, &mut rng);
        let mut y: f64 = rng.sample(StandardNormal);
        let mut y2: f64 = rng.sample(StandardNormal);
        let z = normal(z_dim, &mut rng);
        let mut z2 = normal(z_dim, &mut rng);
        // Deterministic boundary cases after the random probes.
        match k.checked_sub(probes) {
            Some(0) => y2 = y,
            Some(1) => z2.clone_from(&z),
            Some(2) => {
                y = 0.0;
                y2 = 1.0;
            }
            _ => {}
        }

        let fy = finite(f.eval(t, &x, y, &z), "f", || fmt_args(t, &x, y, &z))?;
        let fy2 = finite(f.eval(t, &x, y2, &z), "f", || fmt_args(t, &x, y2, &z))?;
        let dy = y - y2;
        a1.record(dy * (fy - fy2), f.mu * dy * dy, || {
            format!("y={y}, y'={y2}, t={t}, x={x:?}, z={z:?}")
        });

        let fz2 = finite(f.eval(t, &x, y, &z2), "f", || fmt_args(t, &x, y, &z2))?;
        let dz2: f64 = z.iter().zip(&z2).map(|(a, b)| (a - b) * (a - b)).sum();
        a2.record((fy - fz2).powi(2), f.kf * dz2, || {
            format!("z={z:?}, z'={z2:?}, t={t}, x={x:?}, y={y}")
        });

        if f.cf.is_finite() {
            let f0 = finite(f.eval(t, &x, y, &zero_z), "f", || fmt_args(t, &x, y, &zero_z))?;
            a3.record(f0.abs(), f.cf * (1.0 + y.abs().powf(f.growth_p)), || {
                format!("y={y}, t={t}, x={x:?}")
            });
        }

        g.eval(t, &x, y, &z, &mut g1);
        g.eval(t, &x, y2, &z2, &mut g2);
        for v in g1.iter().chain(&g2) {
            finite(*v, "g", || fmt_args(t, &x, y, &z))?;
        }
        let dg2: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b) * (a - b)).sum();
        a4.record(dg2, g.kg * dy * dy + g.eps * dz2, || {
            format!("(y, z)=({y}, {z:?}), (y', z')=({y2}, {z2:?}), t={t}, x={x:?}")
        });

        if g.vanishing_at_zero {
            g.eval(t, &x, y, &zero_z, &mut g1);
            let n2: f64 = g1.iter().map(|v| v * v).sum();
            vanish.record(n2, 0.0, || format!("g(t, x, y, 0) = {g1:?} at y={y}, t={t}"));
        }

        if g.z_free || g.y_free {
            let yy = if g.y_free { y2 } else { y };
            let zz = if g.z_free { z2.clone() } else { z.clone() };
            g.eval(t, &x, y, &z, &mut g1);
            g.eval(t, &x, yy, &zz, &mut g2);
            let d2: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b) * (a - b)).sum();
            free.record(d2, 0.0, || {
                format!("g changes between (y, z)=({y}, {z:?}) and ({yy}, {zz:?})")
            });
        }

        if g.x_lipschitz {
            g.eval(t, &x, y, &z, &mut g1);
            g.eval(t, &x2, y, &z, &mut g2);
            let d: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b) * (a - b)).sum();
            let dx2: f64 = x.iter().zip(&x2).map(|(a, b)| (a - b) * (a - b)).sum();
            a6.record(d, g.kg * g.kg * dx2, || format!("x={x:?}, x'={x2:?}, y={y}, z={z:?}"));
        }
    }
    let mut checks = vec![a1.finish(), a2.finish()];
    if f.cf.is_finite() {
        checks.push(a3.finish());
    }
    checks.push(a4.finish());
    if g.vanishing_at_zero {
        checks.push(vanish.finish());
    }
    if g.z_free || g.y_free {
        checks.push(free.finish());
    }
    if g.x_lipschitz {
        checks.push(a6.finish());
    }
    Ok(ValidationReport { probes, checks })
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn h() -> TerminalCondition {
        TerminalCondition::singular(Arc::new(|x: &[f64]| {
            if x[0] == 0.0 {
                f64::INFINITY
            } else {
                1.0 / x[0].abs()
            }
        }))
    }

    proptest! {
        #[test]
        fn truncation_monotone_and_dominated(x in -3.0f64..3.0, n in 0.1f64..50.0) {
            let tc = h();
            let a = tc.truncate(n).eval(&[x]);
            let b = tc.truncate(n + 1.0).eval(&[x]);
            prop_assert!(a <= b);
            prop_assert!(b <= tc.raw(&[x]));
        }

        #[test]
        fn floor_dominates_truncation(x in -3.0f64..3.0, n in 0.1f64..50.0, m in 1.0f64..64.0) {
            let tc = h();
            let fl = tc.floor(n, m).eval(&[x]);
            prop_assert!(fl >= tc.truncate(n).eval(&[x]));
            prop_assert!(fl >= 1.0 / m);
            prop_assert!(tc.floor(n, m + 1.0).eval(&[x]) <= fl);
        }
    }
}
