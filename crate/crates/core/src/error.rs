use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Shape,
        got: Shape,
    },
    #[error("spatial size {h}x{w} is not a multiple of {multiple}")]
    NotMultiple { h: usize, w: usize, multiple: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("ROC undefined: ground truth contains a single class")]
    RocUndefined,
    #[error("non-finite loss {total} (components: {components})")]
    NonFinite { total: f64, components: String },
    #[error("config: {0}")]
    Config(String),
}

