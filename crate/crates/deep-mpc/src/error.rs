use thiserror::Error;

/// Errors surfaced by the control stack.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid link index {link} for a {n_links}-link model")]
    InvalidLink { link: usize, n_links: usize },

    #[error("integration blow-up at t = {t}: state left the finite range")]
    IntegrationBlowUp { t: f64 },

    #[error("control matrix is singular and no slack augmentation was supplied")]
    SingularControlMatrix,

    #[error("control matrix is rank-deficient; slack completion is not defined")]
    RankDeficient,

    #[error("gain matrix must be symmetric positive-definite ({0})")]
    NotPositiveDefinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("MPC problem infeasible: violated constraint class `{class}` by {violation:.3e}")]
    Infeasible { class: String, violation: f64 },

    #[error("solver did not converge within {iterations} iterations (best objective {best_objective:.6e})")]
    MaxIterations {
        iterations: usize,
        best_objective: f64,
    },

    #[error("empty log: {0}")]
    EmptyLog(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
