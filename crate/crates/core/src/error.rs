use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants fall in three families: configuration problems (bad input that
/// the user must fix), numerical failures (blow-ups, caustics, step-size
/// violations) and file-format problems. [`Error::kind`] exposes the family
/// so the command line can map it onto an exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("configuration error at line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("expression error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("unbound variable `{0}`")]
    Unbound(String),

    #[error("domain error: {func} undefined at {value}")]
    Domain { func: &'static str, value: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("integration blow-up at t = {t}: last good state q = {q:?}, p = {p:?}")]
    Blowup { t: f64, q: Vec<f64>, p: Vec<f64> },

    #[error("ensemble member {index} failed: {source}")]
    Member {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("CFL violation at node {node} (x = {coords:?}): |v| dt = {displacement} > {limit}")]
    Cfl {
        node: usize,
        coords: Vec<f64>,
        displacement: f64,
        limit: f64,
    },

    #[error("caustic reached at t = {t}")]
    Caustic { t: f64 },

    #[error("trajectory left the field domain at t = {t}")]
    DomainExit { t: f64 },

    #[error("scattered characteristics too sparse near node {node}")]
    Coverage { node: usize },

    #[error("Newton iteration did not converge at t = {t}")]
    RootFind { t: f64 },

    #[error("degenerate sensitivity matrix at t = {t} (det = {det})")]
    Degenerate { t: f64, det: f64 },

    #[error("point lies outside the interior stencil: {0}")]
    OutOfStencil(String),

    #[error("scheme error: {0}")]
    Scheme(String),

    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error family used for exit-code mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numerical,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::ConfigLine { .. }
            | Error::Parse { .. }
            | Error::Unbound(_)
            | Error::Contract(_)
            | Error::Format { .. } => ErrorKind::Config,
            Error::Io { .. } => ErrorKind::Io,
            Error::Member { source, .. } => source.kind(),
            _ => ErrorKind::Numerical,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn scheme(msg: impl Into<String>) -> Self {
        Error::Scheme(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
