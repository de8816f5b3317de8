use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    Dimensions(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Mismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("task vector outside the task space (norm {norm:.6})")]
    OutsideTaskSpace { norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("singular system in {context} (rank {rank} < {required})")]
    Singular {
        context: &'static str,
        rank: usize,
        required: usize,
    },

    #[error("source map is rank deficient (sigma_min {sigma_min:.3e} <= tol {tol:.3e}); re-explore before exploiting")]
    RankDeficient { sigma_min: f64, tol: f64 },

    #[error("vectors are not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
