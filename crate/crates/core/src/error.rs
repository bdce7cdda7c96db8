use thiserror::Error;

/// Errors raised by the numerical pipeline.
///
/// Every variant names the module that produced it so that callers (the CLI in
/// particular) can report the failing stage without inspecting messages.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("[{module}] invalid input: {detail}")]
    InvalidInput { module: &'static str, detail: String },

    #[error("[{module}] numeric failure: {detail}")]
    NumericFailure { module: &'static str, detail: String },

    #[error("[{module}] invalid model: {detail}")]
    InvalidModel { module: &'static str, detail: String },

    #[error("[{module}] invalid config: {detail}")]
    InvalidConfig { module: &'static str, detail: String },

    #[error("[{module}] point outside the effective domain: {detail}")]
    OutsideDomain { module: &'static str, detail: String },
}

impl Error {
    pub fn invalid_input(module: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidInput { module, detail: detail.into() }
    }

    pub fn numeric(module: &'static str, detail: impl Into<String>) -> Self {
        Error::NumericFailure { module, detail: detail.into() }
    }

    pub fn invalid_model(module: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidModel { module, detail: detail.into() }
    }

    pub fn invalid_config(module: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidConfig { module, detail: detail.into() }
    }

    pub fn outside_domain(module: &'static str, detail: impl Into<String>) -> Self {
        Error::OutsideDomain { module, detail: detail.into() }
    }

    /// True for failures of an iterative or linear-algebra routine.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NumericFailure { .. })
    }

    pub fn module(&self) -> &'static str {
        match self {
            Error::InvalidInput { module, .. }
            | Error::NumericFailure { module, .. }
            | Error::InvalidModel { module, .. }
            | Error::InvalidConfig { module, .. }
            | Error::OutsideDomain { module, .. } => module,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(module: &'static str, what: &str, x: &[f64]) -> Result<()> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid_input(
            module,
            format!("{what} has non-finite coordinate {i}: {:?}", x),
        ));
    }
    Ok(())
}
