use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("probability {value} at cell {cell} is outside the open interval (0, 1)")]
    Boundary { cell: usize, value: f64 },

    #[error("overdispersion {0} is outside (0, 1)")]
    InvalidTheta(f64),

    #[error("model is not identified: {0}")]
    Unidentified(String),

    #[error("station {station}: covariance matrix is singular")]
    SingularCovariance { station: usize },

    #[error("singular information matrix: {0}")]
    SingularInformation(String),

    #[error("log-likelihood is not finite at the starting point; supply initial values")]
    BadStart,

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("infeasible margins at {axis} {index}: seed is zero but margin is {margin}")]
    Infeasible {
        axis: &'static str,
        index: usize,
        margin: f64,
    },

    #[error("all {0} replicates failed to converge")]
    AllReplicatesFailed(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error at row {row}: {message}")]
    Data { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
