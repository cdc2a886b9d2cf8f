use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid format: {0}")]
    Format(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("too many solver failures: {failed} of {total} samples")]
    TooManyFailures { failed: usize, total: usize },

    #[error("configuration fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("crossbar evaluation failed at tile ({tile_row}, {tile_col}) slice {slice}: {source}")]
    Tile {
        tile_row: usize,
        tile_col: usize,
        slice: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
