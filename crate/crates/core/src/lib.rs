//! Monte-Carlo solvers and diagnostics for backward doubly stochastic
//! differential equations.

pub mod error;
pub mod expr;
pub mod field;
pub mod grid;
pub mod noise;
pub mod oracles;
pub mod regression;
pub mod sde;
pub mod singular;
pub mod solver;
pub mod drivers;
pub mod stats;
pub mod test_fn;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use noise::{sample_paths, sample_paths_with_b, DualBrownianPaths, NoiseId};
pub use drivers::{
    validate_assumptions, GeneratorKind, GeneratorSpec, NoiseCoefficientSpec, TerminalCondition, TerminalKind,
    ValidationReport,
};
pub use expr::Expr;
pub use field::{
    build_field, field_from_solution, malliavin_identity_check, terminal_trace, weak_form_residual, weighted_norm,
    RandomField, SpatialGrid, WeightFunction,
};
pub use regression::{BasisFamily, RegressionBasis, Ridge};
pub use sde::{euler_maruyama, ForwardPaths, InitialLaw, SdeCoefficients};
pub use singular::{
    check_apriori_bound, estimate_z_moments, floor_ladder_gap, solve_singular_ladder, terminal_behavior, LadderResult,
    SingularEstimates,
};
pub use solver::{
    compare_coupled, picard_solve, solve_lsmc, solve_shift_reduction, BackwardSolution, BdsdeProblem, DriftStep,
    LsmcConfig, PicardConfig,
};
pub use stats::Estimate;
pub use test_fn::{Bump, SpaceTimeTest, TestFunction, TimeFactor};
