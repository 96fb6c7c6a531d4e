use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("map generation failed: {0}")]
    Generation(String),

    #[error("protocol error: {0}")]
    Protocol(String),
}
