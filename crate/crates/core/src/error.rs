use thiserror::Error;

use crate::funcsim::FuncSimError;
use crate::preprocess::PreprocessError;
use crate::probe::ProbeError;
use crate::repsim::RepSimError;
use crate::stats::StatsError;
use crate::tensor_io::TensorIoError;

/// Union of the per-module errors, used by the pipeline and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    RepSim(#[from] RepSimError),
    #[error(transparent)]
    FuncSim(#[from] FuncSimError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("at least three distinct epsilon levels are required, got {0}")]
    TooFewLevels(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
