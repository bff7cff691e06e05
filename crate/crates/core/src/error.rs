use thiserror::Error;

/// Errors raised by the solvers and diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical blow-up at step {step}: {detail}")]
    NumericalBlowup { step: usize, detail: String },

    #[error("capability error: {0}")]
    Capability(String),

    #[error("singular regression at step {step}: {detail}")]
    SingularRegression { step: usize, detail: String },

    #[error("root solve failed: {0}")]
    RootSolve(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("coupling error: {0}")]
    Coupling(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("non-integrable weight: {0}")]
    NonIntegrableWeight(String),

    #[error("expression error: {0}")]
    Expression(String),
}

impl Error {
    /// True for errors caused by the inputs rather than by the numerics.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Shape(_)
                | Error::Capability(_)
                | Error::Mode(_)
                | Error::Coupling(_)
                | Error::NonIntegrableWeight(_)
                | Error::Expression(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
