use fedhet_core::evalstats::EvalError;
use fedhet_core::fedcore::FlError;
use fedhet_core::nnet::NnError;
use fedhet_core::synthdata::DataError;
use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("model: {0}")]
    Model(#[from] NnError),
    #[error("training: {0}")]
    Training(#[from] FlError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Other(String),
}
