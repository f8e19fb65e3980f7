use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("column `{0}` not found in input")]
    MissingColumn(String),

    #[error("cannot parse value at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("column `{0}` has zero variance")]
    DegenerateColumn(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("singular design matrix: {0}")]
    SingularDesign(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ill-conditioned spline system: {0} (try fewer degrees of freedom)")]
    Conditioning(String),

    #[error("non-positive variance estimate {0}")]
    DegenerateVariance(f64),

    #[error("exposure has no variation left after partialling out controls")]
    DegenerateExposure,

    #[error("quadrature did not converge: {0}")]
    Instability(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
