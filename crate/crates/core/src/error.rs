use thiserror::Error;

use crate::data::ParseError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("initialization failed after {attempts} attempts: log density not finite ({block})")]
    Initialization { attempts: usize, block: String },
    #[error("insufficient historical trials: {found} found, at least 2 required")]
    InsufficientHistorical { found: usize },
    #[error("mixture fit failed: {0}")]
    MixtureFit(String),
    #[error("unknown bundled scenario `{name}`; available: {available}")]
    UnknownScenario { name: String, available: String },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
