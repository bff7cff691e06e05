//! Test functions for generator evaluations, weak-form residuals and trace
//! integrals.

use std::fmt::Debug;
use std::sync::Arc;

/// A smooth function on `R^d`. Derivatives are optional: `gradient` and
/// `hessian` return `false` when they are not available in closed form, and
/// callers may then fall back to central differences.
pub trait TestFunction: Send + Sync + Debug {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes `∇θ(x)` into `out` (length `d`).
    fn gradient(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// Writes `D²θ(x)` into `out`, row-major `d × d`.
    fn hessian(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// A closed ball `(center, radius)` containing the support, if compact.
    fn support_ball(&self) -> Option<(Vec<f64>, f64)> {
        None
    }
}

/// Default central-difference step `eps^{1/3} · max(1, |x|)`.
pub fn fd_step(x: &[f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    f64::EPSILON.cbrt() * norm.max(1.0)
}

/// Central-difference gradient with step `h`.
pub fn fd_gradient(theta: &dyn TestFunction, x: &[f64], h: f64, out: &mut [f64]) {
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = theta.value(&p);
        p[i] = x[i] - h;
        let down = theta.value(&p);
        p[i] = x[i];
        out[i] = (up - down) / (2.0 * h);
    }
}

/// Central-difference Hessian with step `h`, row-major.
pub fn fd_hessian(theta: &dyn TestFunction, x: &[f64], h: f64, out: &mut [f64]) {
    let d = x.len();
    let mut p = x.to_vec();
    let f0 = theta.value(x);
    for i in 0..d {
        p[i] = x[i] + h;
        let up = theta.value(&p);
        p[i] = x[i] - h;
        let down = theta.value(&p);
        p[i] = x[i];
        out[i * d + i] = (up - 2.0 * f0 + down) / (h * h);
        for j in (i + 1)..d {
            let mut corner = |si: f64, sj: f64| {
                p[i] = x[i] + si * h;
                p[j] = x[j] + sj * h;
                let v = theta.value(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0)
                + corner(-1.0, -1.0))
                / (4.0 * h * h);
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
}

/// `A · exp(-1 / (1 - |x - c|² / R²))` inside the ball, zero outside.
#[derive(Debug, Clone)]
pub struct Bump {
    center: Vec<f64>,
    radius: f64,
    amplitude: f64,
}

impl Bump {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        assert!(radius > 0.0, "bump radius must be positive");
        Self {
            center,
            radius,
            amplitude: 1.0,
        }
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    fn s(&self, x: &[f64]) -> f64 {
        let r2: f64 = x
            .iter()
            .zip(&self.center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum();
        r2 / (self.radius * self.radius)
    }
}

impl TestFunction for Bump {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let s = self.s(x);
        if s >= 1.0 {
            0.0
        } else {
            self.amplitude * (-1.0 / (1.0 - s)).exp()
        }
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        let s = self.s(x);
        out.iter_mut().for_each(|v| *v = 0.0);
        if s >= 1.0 {
            return true;
        }
        let w = self.amplitude * (-1.0 / (1.0 - s)).exp();
        let a = -1.0 / ((1.0 - s) * (1.0 - s));
        let r2 = self.radius * self.radius;
        for (i, o) in out.iter_mut().enumerate() {
            *o = w * a * 2.0 * (x[i] - self.center[i]) / r2;
        }
        true
    }

    fn hessian(&self, x: &[f64], out: &mut [f64]) -> bool {
        let d = self.dim();
        let s = self.s(x);
        out.iter_mut().for_each(|v| *v = 0.0);
        if s >= 1.0 {
            return true;
        }
        let w = self.amplitude * (-1.0 / (1.0 - s)).exp();
        let one_s = 1.0 - s;
        let a = -1.0 / (one_s * one_s);
        let da = -2.0 / (one_s * one_s * one_s);
        let r2 = self.radius * self.radius;
        for i in 0..d {
            let yi = 2.0 * (x[i] - self.center[i]) / r2;
            for j in 0..d {
                let yj = 2.0 * (x[j] - self.center[j]) / r2;
                let mut v = w * (a * a + da) * yi * yj;
                if i == j {
                    v += w * a * 2.0 / r2;
                }
                out[i * d + j] = v;
            }
        }
        true
    }

    fn support_ball(&self) -> Option<(Vec<f64>, f64)> {
        Some((self.center.clone(), self.radius))
    }
}

/// `θ(x) = a |x|²`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub dim: usize,
    pub scale: f64,
}

impl TestFunction for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.scale * x.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        for (o, v) in out.iter_mut().zip(x) {
            *o = 2.0 * self.scale * v;
        }
        true
    }

    fn hessian(&self, _x: &[f64], out: &mut [f64]) -> bool {
        let d = self.dim;
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            out[i * d + i] = 2.0 * self.scale;
        }
        true
    }
}

/// Constant function; zero derivatives.
#[derive(Debug, Clone)]
pub struct Constant {
    pub dim: usize,
    pub value: f64,
}

impl TestFunction for Constant {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, _x: &[f64]) -> f64 {
        self.value
    }

    fn gradient(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|v| *v = 0.0);
        true
    }

    fn hessian(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|v| *v = 0.0);
        true
    }
}

/// Value-only test function; derivatives come from central differences.
#[derive(Clone)]
pub struct FnTest {
    dim: usize,
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl FnTest {
    pub fn new(dim: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            dim,
            f: Arc::new(f),
        }
    }
}

impl Debug for FnTest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FnTest(d={})", self.dim)
    }
}

impl TestFunction for FnTest {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// Pointwise sum of two test functions.
#[derive(Debug, Clone)]
pub struct Sum(pub Arc<dyn TestFunction>, pub Arc<dyn TestFunction>);

impl TestFunction for Sum {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.0.value(x) + self.1.value(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        let mut tmp = vec![0.0; out.len()];
        if !self.0.gradient(x, out) || !self.1.gradient(x, &mut tmp) {
            return false;
        }
        out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
        true
    }

    fn hessian(&self, x: &[f64], out: &mut [f64]) -> bool {
        let mut tmp = vec![0.0; out.len()];
        if !self.0.hessian(x, out) || !self.1.hessian(x, &mut tmp) {
            return false;
        }
        out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
        true
    }

    fn support_ball(&self) -> Option<(Vec<f64>, f64)> {
        let (c0, r0) = self.0.support_ball()?;
        let (c1, r1) = self.1.support_ball()?;
        let gap = c0
            .iter()
            .zip(&c1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Some((c0, r0.max(gap + r1)))
    }
}

/// Time factor of a separable space-time test function `a(s) θ(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeFactor {
    Constant(f64),
    /// `a(s) = c0 + c1 s`
    Affine(f64, f64),
    /// `a(s) = exp(rate · s)`
    Exp(f64),
}

impl TimeFactor {
    pub fn value(&self, s: f64) -> f64 {
        match *self {
            TimeFactor::Constant(c) => c,
            TimeFactor::Affine(c0, c1) => c0 + c1 * s,
            TimeFactor::Exp(rate) => (rate * s).exp(),
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match *self {
            TimeFactor::Constant(_) => 0.0,
            TimeFactor::Affine(_, c1) => c1,
            TimeFactor::Exp(rate) => rate * (rate * s).exp(),
        }
    }
}

/// `Ψ(s, x) = a(s) θ(x)`.
#[derive(Debug, Clone)]
pub struct SpaceTimeTest {
    pub time: TimeFactor,
    pub space: Arc<dyn TestFunction>,
}

impl SpaceTimeTest {
    pub fn new(time: TimeFactor, space: Arc<dyn TestFunction>) -> Self {
        Self { time, space }
    }
}
