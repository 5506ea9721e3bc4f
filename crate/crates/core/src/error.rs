use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The diffusion rate must be strictly positive for the parabolic problem
    /// to be well posed.
    #[error("diffusion rate must be positive, got {0}")]
    NonPositiveDiffusion(f64),

    #[error(
        "point (t={t}, x={x}) lies outside the space-time rectangle [0,{final_time}]x[0,{length}]"
    )]
    OutOfDomain {
        t: f64,
        x: f64,
        final_time: f64,
        length: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// `exp` of the latent field would overflow `f64`.
    #[error("latent source {value} at lattice node (n={n}, j={j}) overflows exp")]
    SourceOverflow { value: f64, n: usize, j: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("Cholesky factorisation failed after {retries} jitter retries")]
    Factorization { retries: usize },

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("optimisation failed: {0}")]
    Optimization(String),

    #[error("empty chain")]
    EmptyChain,

    #[error(
        "checkpoint does not match the current configuration (expected {expected}, found {found})"
    )]
    CheckpointMismatch { expected: String, found: String },

    /// Unrecoverable numerical failure during sampling; the checkpoint holds
    /// the last consistent chain state so that the run can be resumed.
    #[error("chain aborted at iteration {iteration}: {reason}")]
    ChainAborted {
        iteration: usize,
        reason: String,
        checkpoint: Box<crate::sampler::Checkpoint>,
    },
}

impl Error {
    /// Errors that mean "this parameter value is not admissible" rather than a
    /// numerical breakdown. Samplers reject such proposals and optimisers treat
    /// them as an infinite objective.
    pub fn is_inadmissible(&self) -> bool {
        matches!(
            self,
            Error::NonPositiveDiffusion(_) | Error::SourceOverflow { .. } | Error::NonFinite(_)
        )
    }
}
