//! Maps every library error onto the CLI's exit-code classes.

use crate::backend::BackendError;
use crate::config::ConfigError;
use crate::embed::EmbedError;
use crate::experiments::ExperimentError;
use crate::probe::ProbeError;
use crate::prompts::RegistryError;
use crate::storage::StorageError;
use crate::sts::StsError;
use crate::transfer::TransferError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags, config values or names.
    Usage,
    /// Missing, malformed or unusable input or output files.
    Data,
    /// The model backend failed or misbehaved.
    Backend,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Backend => 3,
        }
    }
}

pub trait Classify {
    fn kind(&self) -> ErrorKind;
}

impl Classify for BackendError {
    fn kind(&self) -> ErrorKind {
        match self {
            BackendError::LayerOutOfRange { .. } => ErrorKind::Usage,
            _ => ErrorKind::Backend,
        }
    }
}

impl Classify for RegistryError {
    fn kind(&self) -> ErrorKind {
        match self {
            RegistryError::UnknownSet(_) | RegistryError::UnknownTemplate(_) | RegistryError::EmptySet(_) => {
                ErrorKind::Usage
            }
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for EmbedError {
    fn kind(&self) -> ErrorKind {
        match self {
            EmbedError::Backend(e) => e.kind(),
            EmbedError::Registry(e) => e.kind(),
            EmbedError::ContextOverflow { .. } => ErrorKind::Data,
            EmbedError::EmptyInput => ErrorKind::Usage,
            EmbedError::DimensionMismatch { .. } | EmbedError::Pool(_) => ErrorKind::Backend,
        }
    }
}

impl Classify for StsError {
    fn kind(&self) -> ErrorKind {
        match self {
            StsError::Embed(e) => e.kind(),
            StsError::UnknownDataset(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for TransferError {
    fn kind(&self) -> ErrorKind {
        match self {
            TransferError::Embed(e) => e.kind(),
            TransferError::Pool(_) => ErrorKind::Backend,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for StorageError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Classify for ConfigError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Usage
    }
}

impl Classify for ProbeError {
    fn kind(&self) -> ErrorKind {
        match self {
            ProbeError::Backend(e) => e.kind(),
            ProbeError::Registry(e) => e.kind(),
        }
    }
}

impl Classify for ExperimentError {
    fn kind(&self) -> ErrorKind {
        match self {
            ExperimentError::Sts(e) => e.kind(),
            ExperimentError::Embed(e) => e.kind(),
            ExperimentError::Registry(e) => e.kind(),
            ExperimentError::Invalid(_) => ErrorKind::Usage,
        }
    }
}
