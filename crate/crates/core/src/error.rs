use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("tokenizer unsuitable: {0}")]
    TokenizerUnsuitable(String),

    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("corrupt provider output: {0}")]
    CorruptProviderOutput(String),

    #[error("context overflow: {needed} tokens needed, provider window is {window}")]
    ContextOverflow { needed: usize, window: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("wrong provider: {0}")]
    WrongProvider(String),

    #[error("unsupported check: {0}")]
    UnsupportedCheck(String),

    #[error("benchmark harness failure: {0}")]
    Harness(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
