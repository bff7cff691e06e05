//! Scenario files: TOML with strict keys. See `scenarios/README.md` for the
//! full grammar.

use std::path::Path;
use std::sync::Arc;

use bdsde_core::drivers::{GeneratorKind, GeneratorSpec, NoiseCoefficientSpec, TerminalCondition, TerminalKind};
use bdsde_core::field::SpatialGrid;
use bdsde_core::noise::{sample_paths_with_b, DualBrownianPaths};
use bdsde_core::regression::{BasisFamily, RegressionBasis, Ridge};
use bdsde_core::sde::{euler_maruyama, ForwardPaths, InitialLaw, SdeCoefficients};
use bdsde_core::singular::{delta_schedule, geometric_levels};
use bdsde_core::solver::{BdsdeProblem, DriftStep, LsmcConfig, PicardConfig};
use bdsde_core::test_fn::{Bump, Constant, Quadratic, SpaceTimeTest, TestFunction, TimeFactor};
use bdsde_core::{Expr, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub grid: GridSection,
    pub noise: NoiseSection,
    pub forward: ForwardSection,
    pub driver: DriverSection,
    pub terminal: TerminalSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<LadderSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSection>,
    #[serde(default)]
    pub outputs: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Dimension `k` of `W`.
    #[serde(default = "one")]
    pub w_dim: usize,
    /// Dimension `m` of `B`.
    #[serde(default = "one")]
    pub b_dim: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// Number of independent `B` realizations.
    #[serde(default = "one")]
    pub n_b: usize,
    #[serde(default)]
    pub b_index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardFamily {
    Constant,
    OrnsteinUhlenbeck,
    Expr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardSection {
    pub family: ForwardFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    /// Row-major `d × k`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounded: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smooth: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elliptic_lambda: Option<f64>,
    pub init: InitSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_time: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSection {
    pub f: FSection,
    pub g: GSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FFamily {
    Zero,
    Linear,
    PowerLaw,
    Expr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FKind {
    Lipschitz,
    Monotone,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FSection {
    pub family: FFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dfdy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<FKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GFamily {
    Zero,
    Constant,
    Linear,
    Expr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GSection {
    pub family: GFamily,
    /// Declared constants entering the bounds; always required.
    pub kg: f64,
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    /// One expression per component of `B`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vanishing_at_zero: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_lipschitz: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HFamily {
    Constant,
    Expr,
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HKind {
    Bounded,
    Regular,
    Singular,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSection {
    pub family: HFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<HKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sup: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_on_sublevels: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub singular_set: Option<SingularSetSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    Point,
    Ball,
    InfiniteValues,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingularSetSection {
    pub kind: SetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    #[default]
    Lsmc,
    Shift,
    Picard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RidgeSpec {
    Named(String),
    Value(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default)]
    pub mode: SolverMode,
    #[serde(default = "default_basis")]
    pub basis: BasisFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<RidgeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_step: Option<DriftStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_variate: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picard: Option<PicardSection>,
}

fn default_basis() -> BasisFamily {
    BasisFamily::Polynomial { degree: 2 }
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            mode: SolverMode::Lsmc,
            basis: default_basis(),
            domain: None,
            ridge: None,
            drift_step: None,
            control_variate: None,
            root_tol: None,
            picard: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_sweeps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_tol: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
    /// Geometric levels `2^0 .. 2^k` when `levels` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regular_cap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_x: Option<f64>,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub whole_space: bool,
    /// `T - t_cut` for norms.
    #[serde(default)]
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tests: Vec<TestSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak_form: Option<WindowSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub malliavin: Option<WindowSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Bump,
    Constant,
    Quadratic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    pub name: String,
    pub kind: TestKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<TimeSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub phi: String,
    #[serde(default)]
    pub finite: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub test: String,
    pub r: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub directory: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> String {
    "out".into()
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv]
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_dir(),
            formats: default_formats(),
        }
    }
}

fn missing(section: &str, field: &str) -> CliError {
    CliError::Config(format!("missing field `{field}` in [{section}]"))
}

fn compile(src: &str, section: &str) -> CliResult<Expr> {
    Expr::parse(src).map_err(|e| CliError::Config(format!("[{section}] {e}")))
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let sc: Scenario = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> CliResult<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        let sc = Self::from_toml_str(&text)?;
        Ok((sc, text))
    }

    /// Checks that every object can be built, so errors surface before any
    /// simulation runs.
    pub fn validate(&self) -> CliResult<()> {
        self.grid()?;
        let sde = self.sde()?;
        let init = self.init_law()?;
        if init.dim() != sde.dim() {
            return Err(CliError::Config(format!(
                "[forward.init] has dimension {}, the state has {}",
                init.dim(),
                sde.dim()
            )));
        }
        if self.noise.w_dim != sde.noise_dim() {
            return Err(CliError::Config(format!(
                "[noise] w_dim = {} but the diffusion has {} columns",
                self.noise.w_dim,
                sde.noise_dim()
            )));
        }
        if self.noise.n_paths == 0 || self.noise.n_b == 0 {
            return Err(CliError::Config("[noise] n_paths and n_b must be positive".into()));
        }
        self.generator()?;
        let g = self.noise_coefficient()?;
        if g.m != self.noise.b_dim {
            return Err(CliError::Config(format!(
                "[driver.g] has {} components but b_dim = {}",
                g.m, self.noise.b_dim
            )));
        }
        self.terminal()?;
        self.lsmc_config()?.basis.validate()?;
        if let Some(f) = &self.field {
            self.spatial_grid()?;
            for t in &f.tests {
                self.test_function(&t.name)?;
            }
            if let Some(tr) = &f.trace {
                self.test_function(&tr.phi)?;
            }
            for w in [&f.weak_form, &f.malliavin].into_iter().flatten() {
                self.test_function(&w.test)?;
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.noise.seed = seed;
        self
    }

    pub fn grid(&self) -> CliResult<TimeGrid> {
        Ok(TimeGrid::uniform(self.grid.t_start, self.grid.t_end, self.grid.n_steps)?)
    }

    pub fn start_time(&self) -> f64 {
        self.forward.start_time.unwrap_or(self.grid.t_start)
    }

    pub fn sde(&self) -> CliResult<SdeCoefficients> {
        let fw = &self.forward;
        let mut sde = match fw.family {
            ForwardFamily::Constant => {
                let b = fw.b.clone().ok_or_else(|| missing("forward", "b"))?;
                let sigma = fw.sigma.clone().ok_or_else(|| missing("forward", "sigma"))?;
                let d = b.len().max(1);
                let k = sigma.len() / d;
                SdeCoefficients::constant(b, sigma, k)?
            }
            ForwardFamily::OrnsteinUhlenbeck => {
                let a = fw.a.ok_or_else(|| missing("forward", "a"))?;
                let s = fw.s.ok_or_else(|| missing("forward", "s"))?;
                SdeCoefficients::ornstein_uhlenbeck(a, s)
            }
            ForwardFamily::Expr => {
                let drift: Vec<Expr> = fw
                    .drift
                    .as_ref()
                    .ok_or_else(|| missing("forward", "drift"))?
                    .iter()
                    .map(|s| compile(s, "forward"))
                    .collect::<CliResult<_>>()?;
                let diff: Vec<Expr> = fw
                    .diffusion
                    .as_ref()
                    .ok_or_else(|| missing("forward", "diffusion"))?
                    .iter()
                    .map(|s| compile(s, "forward"))
                    .collect::<CliResult<_>>()?;
                let d = drift.len();
                if d == 0 || diff.len() % d != 0 {
                    return Err(CliError::Config(
                        "[forward] diffusion must list d × k expressions, row-major".into(),
                    ));
                }
                let k = diff.len() / d;
                let mut sde = SdeCoefficients::new(
                    d,
                    k,
                    Arc::new(move |t, x: &[f64], out: &mut [f64]| {
                        for (o, e) in out.iter_mut().zip(&drift) {
                            *o = e.eval(t, x, 0.0, &[]);
                        }
                    }),
                    Arc::new(move |t, x: &[f64], out: &mut [f64]| {
                        for (o, e) in out.iter_mut().zip(&diff) {
                            *o = e.eval(t, x, 0.0, &[]);
                        }
                    }),
                );
                sde.lipschitz_k = fw.lipschitz_k.ok_or_else(|| missing("forward", "lipschitz_k"))?;
                sde
            }
        };
        if let Some(b) = fw.bounded {
            sde.bounded = b;
        }
        if let Some(s) = fw.smooth {
            sde.smooth = s;
        }
        if let Some(l) = fw.elliptic_lambda {
            sde.elliptic_lambda = l;
        }
        Ok(sde)
    }

    pub fn init_law(&self) -> CliResult<InitialLaw> {
        let i = &self.forward.init;
        match (&i.point, &i.lo, &i.hi) {
            (Some(p), None, None) => Ok(InitialLaw::Point(p.clone())),
            (None, Some(lo), Some(hi)) if lo.len() == hi.len() => Ok(InitialLaw::UniformBox {
                lo: lo.clone(),
                hi: hi.clone(),
            }),
            _ => Err(CliError::Config(
                "[forward.init] needs either `point` or both `lo` and `hi` of equal length".into(),
            )),
        }
    }

    pub fn generator(&self) -> CliResult<GeneratorSpec> {
        let f = &self.driver.f;
        let spec = match f.family {
            FFamily::Zero => GeneratorSpec::zero(),
            FFamily::Linear => GeneratorSpec::linear(
                f.a.ok_or_else(|| missing("driver.f", "a"))?,
                f.b.clone().unwrap_or_default(),
                f.c.unwrap_or(0.0),
            )?,
            FFamily::PowerLaw => GeneratorSpec::power_law(f.q.ok_or_else(|| missing("driver.f", "q"))?)?,
            FFamily::Expr => {
                let e = compile(f.expr.as_deref().ok_or_else(|| missing("driver.f", "expr"))?, "driver.f")?;
                let kind = match f.kind.ok_or_else(|| missing("driver.f", "kind"))? {
                    FKind::Lipschitz => GeneratorKind::Lipschitz,
                    FKind::Monotone => GeneratorKind::Monotone,
                };
                let mu = f.mu.ok_or_else(|| missing("driver.f", "mu"))?;
                let kf = f.kf.ok_or_else(|| missing("driver.f", "kf"))?;
                let mut spec = GeneratorSpec::new(kind, mu, kf, Arc::new(move |t, x, y, z| e.eval(t, x, y, z)))?;
                if let Some(d) = &f.dfdy {
                    let de = compile(d, "driver.f")?;
                    spec = spec.with_dfdy(Arc::new(move |t, x, y, z| de.eval(t, x, y, z)));
                }
                spec
            }
        };
        let spec = match (f.cf, f.p) {
            (Some(cf), p) => spec.with_growth(cf, p.unwrap_or(1.0)),
            (None, _) => spec,
        };
        Ok(spec)
    }

    pub fn noise_coefficient(&self) -> CliResult<NoiseCoefficientSpec> {
        let g = &self.driver.g;
        let m = self.noise.b_dim;
        let mut spec = match g.family {
            GFamily::Zero => NoiseCoefficientSpec::zero(m),
            GFamily::Constant => NoiseCoefficientSpec::constant(m, g.c.ok_or_else(|| missing("driver.g", "c"))?),
            GFamily::Linear => {
                let a = g.a.ok_or_else(|| missing("driver.g", "a"))?;
                let b = g.b.clone().unwrap_or_default();
                let s = NoiseCoefficientSpec::linear(a, b)?;
                // Declared constants may round the exact ones, e.g. eps = 0.04 for b = 0.2.
                let below = |declared: f64, exact: f64| declared < exact * (1.0 - 1e-12);
                if below(g.kg, s.kg) || below(g.eps, s.eps) {
                    return Err(CliError::Config(format!(
                        "[driver.g] declared kg = {}, eps = {} are below the exact constants {}, {}",
                        g.kg, g.eps, s.kg, s.eps
                    )));
                }
                s
            }
            GFamily::Expr => {
                let exprs: Vec<Expr> = g
                    .expr
                    .as_ref()
                    .ok_or_else(|| missing("driver.g", "expr"))?
                    .iter()
                    .map(|s| compile(s, "driver.g"))
                    .collect::<CliResult<_>>()?;
                let (uses_x, uses_y, uses_z) = (
                    exprs.iter().any(|e| e.uses_x()),
                    exprs.iter().any(|e| e.uses_y()),
                    exprs.iter().any(|e| e.uses_z()),
                );
                let mm = exprs.len();
                let mut s = NoiseCoefficientSpec::new(
                    mm,
                    g.kg,
                    g.eps,
                    Arc::new(move |t, x, y, z, out: &mut [f64]| {
                        for (o, e) in out.iter_mut().zip(&exprs) {
                            *o = e.eval(t, x, y, z);
                        }
                    }),
                )?;
                s.x_free = !uses_x;
                s.y_free = !uses_y;
                s.z_free = !uses_z;
                s.x_lipschitz = !uses_x;
                s
            }
        };
        spec.kg = g.kg;
        spec.eps = g.eps;
        if !(spec.kg.is_finite() && spec.kg >= 0.0 && (0.0..1.0).contains(&spec.eps)) {
            return Err(CliError::Config("[driver.g] needs kg >= 0 and eps in [0, 1)".into()));
        }
        if let Some(v) = g.vanishing_at_zero {
            spec.vanishing_at_zero = v;
        }
        if let Some(v) = g.x_lipschitz {
            spec.x_lipschitz = v;
        }
        Ok(spec)
    }

    pub fn terminal(&self) -> CliResult<TerminalCondition> {
        let h = &self.terminal;
        let mut tc = match h.family {
            HFamily::Constant => {
                let v = h.value.ok_or_else(|| missing("terminal", "value"))?;
                match h.kind.unwrap_or(HKind::Bounded) {
                    HKind::Singular => TerminalCondition::singular(Arc::new(move |_| v)),
                    _ => TerminalCondition::constant(v)?,
                }
            }
            HFamily::Infinite => TerminalCondition::singular(Arc::new(|_| f64::INFINITY)),
            HFamily::Expr => {
                let e = compile(h.expr.as_deref().ok_or_else(|| missing("terminal", "expr"))?, "terminal")?;
                let t_end = self.grid.t_end;
                let f: bdsde_core::drivers::TerminalFn = Arc::new(move |x: &[f64]| e.eval(t_end, x, 0.0, &[]));
                match h.kind.ok_or_else(|| missing("terminal", "kind"))? {
                    HKind::Bounded => {
                        TerminalCondition::bounded(f, h.sup.ok_or_else(|| missing("terminal", "sup"))?)?
                    }
                    HKind::Regular => TerminalCondition::regular(f),
                    HKind::Singular => TerminalCondition::singular(f),
                }
            }
        };
        if let Some(s) = &h.singular_set {
            let center = || s.center.clone().ok_or_else(|| missing("terminal.singular_set", "center"));
            let dist = |c: &[f64], x: &[f64]| -> f64 {
                c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            };
            tc = match s.kind {
                SetKind::Point => {
                    let c = center()?;
                    let c2 = c.clone();
                    tc.with_singular_set(
                        Arc::new(move |x: &[f64]| dist(&c, x) == 0.0),
                        Some(Arc::new(move |x: &[f64]| dist(&c2, x))),
                    )
                }
                SetKind::Ball => {
                    let c = center()?;
                    let r = s.radius.ok_or_else(|| missing("terminal.singular_set", "radius"))?;
                    let c2 = c.clone();
                    tc.with_singular_set(
                        Arc::new(move |x: &[f64]| dist(&c, x) <= r),
                        Some(Arc::new(move |x: &[f64]| (dist(&c2, x) - r).max(0.0))),
                    )
                }
                SetKind::InfiniteValues => tc,
            };
        }
        if let Some(l) = h.lipschitz_on_sublevels {
            tc = tc.with_lipschitz_on_sublevels(l);
        }
        Ok(tc)
    }

    pub fn is_singular(&self) -> CliResult<bool> {
        Ok(self.terminal()?.kind == TerminalKind::Singular)
    }

    pub fn problem(&self) -> CliResult<BdsdeProblem> {
        Ok(BdsdeProblem {
            f: self.generator()?,
            g: self.noise_coefficient()?,
            terminal: self.terminal()?,
        })
    }

    pub fn basis(&self) -> CliResult<RegressionBasis> {
        let s = &self.solver;
        let mut basis = RegressionBasis::new(s.basis);
        if let Some(d) = &s.domain {
            basis = basis.with_domain(d.iter().map(|[a, b]| (*a, *b)).collect());
        }
        basis = match &s.ridge {
            None => basis,
            Some(RidgeSpec::Named(n)) if n == "auto" => basis.with_ridge(Ridge::Auto),
            Some(RidgeSpec::Named(n)) => {
                return Err(CliError::Config(format!("[solver] ridge must be \"auto\" or a number, got {n:?}")))
            }
            Some(RidgeSpec::Value(v)) => basis.with_ridge(Ridge::Fixed(*v)),
        };
        Ok(basis)
    }

    pub fn lsmc_config(&self) -> CliResult<LsmcConfig> {
        let s = &self.solver;
        let mut cfg = LsmcConfig::new(self.basis()?);
        if let Some(d) = s.drift_step {
            cfg = cfg.with_drift_step(d);
        }
        if let Some(c) = s.control_variate {
            cfg = cfg.with_control_variate(c);
        }
        if let Some(t) = s.root_tol {
            if !(t > 0.0) {
                return Err(CliError::Config("[solver] root_tol must be positive".into()));
            }
            cfg.root_tol = t;
        }
        Ok(cfg)
    }

    pub fn picard_config(&self) -> PicardConfig {
        let mut p = PicardConfig::default();
        if let Some(s) = &self.solver.picard {
            if let Some(v) = s.max_sweeps {
                p.max_sweeps = v;
            }
            p.alpha = s.alpha.or(p.alpha);
            p.eta = s.eta.or(p.eta);
            if let Some(v) = s.stop_tol {
                p.stop_tol = v;
            }
        }
        p
    }

    /// Noise for the `j`-th `B` realization.
    pub fn noise(&self, j: u64) -> CliResult<DualBrownianPaths> {
        let grid = self.grid()?;
        Ok(sample_paths_with_b(
            &grid,
            self.noise.w_dim,
            self.noise.b_dim,
            self.noise.n_paths,
            self.noise.seed,
            self.noise.b_index + j,
        )?)
    }

    pub fn forward_paths(&self, noise: &DualBrownianPaths) -> CliResult<ForwardPaths> {
        Ok(euler_maruyama(&self.sde()?, self.start_time(), &self.init_law()?, noise)?)
    }

    pub fn ladder_levels(&self) -> CliResult<Vec<f64>> {
        let l = self.ladder.as_ref().ok_or_else(|| CliError::Config("missing [ladder] section".into()))?;
        match (&l.levels, l.k) {
            (Some(v), _) => Ok(v.clone()),
            (None, Some(k)) => Ok(geometric_levels(k)),
            (None, None) => Err(missing("ladder", "levels")),
        }
    }

    pub fn ladder_deltas(&self) -> Vec<f64> {
        let t = self.grid.t_end - self.grid.t_start;
        match &self.ladder {
            Some(LadderSection { deltas: Some(d), .. }) => d.clone(),
            Some(l) => delta_schedule(t, l.delta_count.unwrap_or(4)),
            None => delta_schedule(t, 4),
        }
    }

    pub fn power_q(&self) -> CliResult<f64> {
        self.generator()?
            .power_q()
            .ok_or_else(|| CliError::Core(bdsde_core::Error::Mode("this command needs a power-law generator".into())))
    }

    pub fn spatial_grid(&self) -> CliResult<SpatialGrid> {
        let f = self.field.as_ref().ok_or_else(|| CliError::Config("missing [field] section".into()))?;
        let g = match (&f.n, f.h_x) {
            (Some(n), _) => SpatialGrid::new(f.lo.clone(), f.hi.clone(), n.clone())?,
            (None, Some(h)) => {
                let n = f
                    .lo
                    .iter()
                    .zip(&f.hi)
                    .map(|(l, u)| ((u - l) / h).round().max(1.0) as usize + 1)
                    .collect();
                SpatialGrid::new(f.lo.clone(), f.hi.clone(), n)?
            }
            (None, None) => return Err(missing("field", "n")),
        };
        Ok(g.whole_space(f.whole_space))
    }

    pub fn test_function(&self, name: &str) -> CliResult<SpaceTimeTest> {
        let f = self.field.as_ref().ok_or_else(|| CliError::Config("missing [field] section".into()))?;
        let spec = f
            .tests
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CliError::Config(format!("[field] no test function named {name:?}")))?;
        let d = f.lo.len();
        let space: Arc<dyn TestFunction> = match spec.kind {
            TestKind::Bump => {
                let c = spec.center.clone().ok_or_else(|| missing("field.tests", "center"))?;
                let r = spec.radius.ok_or_else(|| missing("field.tests", "radius"))?;
                if c.len() != d || !(r > 0.0) {
                    return Err(CliError::Config(format!("[field.tests] {name}: bad center or radius")));
                }
                Arc::new(Bump::new(c, r).with_amplitude(spec.amplitude.unwrap_or(1.0)))
            }
            TestKind::Constant => Arc::new(Constant {
                dim: d,
                value: spec.value.ok_or_else(|| missing("field.tests", "value"))?,
            }),
            TestKind::Quadratic => Arc::new(Quadratic {
                dim: d,
                scale: spec.amplitude.unwrap_or(1.0),
            }),
        };
        let time = match &spec.time {
            None => TimeFactor::Constant(1.0),
            Some(TimeSpec { constant: Some(c), affine: None, exp: None }) => TimeFactor::Constant(*c),
            Some(TimeSpec { constant: None, affine: Some([a, b]), exp: None }) => TimeFactor::Affine(*a, *b),
            Some(TimeSpec { constant: None, affine: None, exp: Some(r) }) => TimeFactor::Exp(*r),
            Some(_) => {
                return Err(CliError::Config(format!(
                    "[field.tests] {name}: time takes exactly one of constant, affine, exp"
                )))
            }
        };
        Ok(SpaceTimeTest::new(time, space))
    }

    /// Node index of time `t`, which must lie on the grid.
    pub fn node_of(&self, t: f64, what: &str) -> CliResult<usize> {
        self.grid()?
            .index_of(t)
            .ok_or_else(|| CliError::Config(format!("{what}: time {t} is not a grid node")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "minimal"
[grid]
t_end = 1.0
n_steps = 8
[noise]
n_paths = 10
seed = 1
[forward]
family = "constant"
b = [0.0]
sigma = [1.0]
init = { point = [0.0] }
[driver.f]
family = "zero"
[driver.g]
family = "constant"
c = 1.0
kg = 0.0
eps = 0.0
[terminal]
family = "constant"
value = 0.0
"#;

    #[test]
    fn minimal_scenario_parses() {
        let sc = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(sc.grid().unwrap().n_steps(), 8);
        assert!(sc.noise_coefficient().unwrap().state_free());
        assert_eq!(sc.solver.mode, SolverMode::Lsmc);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = MINIMAL.replace("seed = 1", "seed = 1\nsede = 2");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_eps_names_the_field() {
        let text = MINIMAL.replace("eps = 0.0\n", "");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("eps"), "{err}");
    }

    #[test]
    fn expression_drivers_build() {
        let text = MINIMAL
            .replace("family = \"zero\"", "family = \"expr\"\nexpr = \"-y*|y| + 0.1*z\"\nkind = \"monotone\"\nmu = 0.0\nkf = 0.01")
            .replace("family = \"constant\"\nc = 1.0", "family = \"expr\"\nexpr = [\"0.5*sin(y)\"]");
        let sc = Scenario::from_toml_str(&text).unwrap();
        let f = sc.generator().unwrap();
        assert_eq!(f.eval(0.0, &[0.0], 2.0, &[1.0]), -4.0 + 0.1);
        let g = sc.noise_coefficient().unwrap();
        assert!(g.z_free && !g.y_free && g.x_free);
        let mut out = [0.0];
        g.eval(0.0, &[0.0], std::f64::consts::FRAC_PI_2, &[0.0], &mut out);
        assert!((out[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bad_expression_is_a_config_error() {
        let text = MINIMAL.replace("family = \"constant\"\nvalue = 0.0", "family = \"expr\"\nkind = \"regular\"\nexpr = \"x +* 2\"");
        assert_eq!(Scenario::from_toml_str(&text).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn shipped_scenarios_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
        let mut count = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                count += 1;
            }
        }
        assert!(count >= 10);
    }

    #[test]
    fn round_trips_through_toml() {
        let sc = Scenario::from_toml_str(MINIMAL).unwrap();
        let text = toml::to_string(&sc).unwrap();
        let back = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(back.name, sc.name);
    }
}
