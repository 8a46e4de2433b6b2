use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain where a model curve is defined.
    #[error("{what} = {value} is outside the valid domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },

    /// The cell model produced a physically meaningless quantity.
    #[error("model error: {0}")]
    Model(String),

    /// A configuration value violates an invariant. `path` is the dotted key.
    #[error("invalid configuration at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("simulation fault at t = {time} s: {reason}")]
    Simulation { time: f64, reason: String },

    #[error("failed to parse {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input (scenario files, CLI values).
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Parse { .. } | Error::Domain { .. })
    }
}
