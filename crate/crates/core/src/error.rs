use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("matrix is not symmetric (defect {0:e})")]
    NotSymmetric(f64),

    #[error("time {t} outside schedule domain [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("singular covariance at t = {t:e}; evaluate at t >= t_eps ({t_eps:e})")]
    SingularCovariance { t: f64, t_eps: f64 },

    #[error("integration diverged at step {step} (t = {t})")]
    Diverged { step: usize, t: f64 },

    #[error("training diverged at step {step}: loss = {loss}, |score params| = {score_norm:e}, |forward params| = {forward_norm:e}")]
    TrainingDiverged {
        step: usize,
        loss: f64,
        score_norm: f64,
        forward_norm: f64,
    },

    #[error("invalid parameter: {0}")]
    Invalid(String),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { context, expected, got })
    }
}
