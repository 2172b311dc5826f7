use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("every position is ignored; the loss is empty")]
    EmptyLoss,
    #[error("index {index} out of range for size {bound} in {context}")]
    Index {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_positions {max}")]
    Length { len: usize, max: usize },
    #[error("adapter stack error: {0}")]
    Stack(String),
    #[error("adapter incompatible with encoder: {0}")]
    Compatibility(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("sequence has no maskable token")]
    Unmaskable,
    #[error("data error: {0}")]
    Data(String),
    #[error("schema error: {0}")]
    Schema(String),
}
