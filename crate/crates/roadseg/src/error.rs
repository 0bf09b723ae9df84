//! Errors of the IO and command-line layer.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, IoError>;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Core(#[from] roadseg_core::error::Error),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("sample {id:?}: missing {what} file")]
    MissingFile { id: String, what: &'static str },
    #[error("sample {id:?}: more than one image file")]
    Ambiguous { id: String },
    #[error("sample {id:?}: image is {image:?} but mask is {mask:?}")]
    SizeMismatch { id: String, image: (u32, u32), mask: (u32, u32) },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("checkpoint encoder does not match the configuration:\n{diff}")]
    SpecMismatch { diff: String },
}

impl IoError {
    /// Whether the error stems from user input (bad configuration, missing
    /// or inconsistent data) rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        use roadseg_core::error::Error as E;
        match self {
            Self::Core(e) => matches!(e, E::Config(_) | E::Invalid(_) | E::NotMultiple { .. } | E::Empty(_)),
            Self::Read { .. } | Self::MissingFile { .. } | Self::Ambiguous { .. } | Self::SizeMismatch { .. } => true,
            Self::Image { .. } | Self::Checkpoint { .. } | Self::SpecMismatch { .. } => true,
            Self::Write { .. } => false,
        }
    }
}
