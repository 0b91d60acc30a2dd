use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] ndgrad::TensorError),
    #[error(transparent)]
    Env(#[from] microrts::EnvError),
    #[error(transparent)]
    Checkpoint(#[from] ndgrad::checkpoint::CheckpointError),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("wire format: {0}")]
    Wire(String),
    #[error("league: {0}")]
    League(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
