//! Crate-wide error and its process exit status.

use std::process::ExitCode;

use crate::archive::ArchiveError;
use crate::hosts::HostError;
use crate::metadata::MetadataError;
use crate::p2p::P2pError;
use crate::registry::RegistryError;
use crate::segments::SegmentError;

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ExitStatus {
    Success = 0,
    Failure = 1,
    Usage = 2,
    Integrity = 3,
    NotFound = 4,
    Auth = 5,
}

impl From<ExitStatus> for ExitCode {
    fn from(status: ExitStatus) -> Self {
        ExitCode::from(status as u8)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Segments(#[from] SegmentError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    P2p(#[from] P2pError),
}

impl Error {
    pub fn status(&self) -> ExitStatus {
        match self {
            Self::Usage(_) => ExitStatus::Usage,
            Self::Integrity(_) => ExitStatus::Integrity,
            Self::Io(e) => io_status(e),
            Self::Archive(e) => archive_status(e),
            Self::Metadata(e) => metadata_status(e),
            Self::Segments(e) => segment_status(e),
            Self::Registry(e) => registry_status(e),
            Self::Host(e) => host_status(e),
            Self::P2p(e) => p2p_status(e),
        }
    }
}

fn io_status(e: &std::io::Error) -> ExitStatus {
    match e.kind() {
        std::io::ErrorKind::NotFound => ExitStatus::NotFound,
        _ => ExitStatus::Failure,
    }
}

fn archive_status(e: &ArchiveError) -> ExitStatus {
    match e {
        ArchiveError::Io { source, .. } => io_status(source),
        ArchiveError::Decode(_) => ExitStatus::Integrity,
        ArchiveError::InvalidOption(_) => ExitStatus::Usage,
        _ => ExitStatus::Failure,
    }
}

fn metadata_status(e: &MetadataError) -> ExitStatus {
    match e {
        MetadataError::UnknownArtifact(_) => ExitStatus::NotFound,
        MetadataError::Io(e) => io_status(e),
        MetadataError::Archive(e) => archive_status(e),
        _ => ExitStatus::Failure,
    }
}

fn segment_status(e: &SegmentError) -> ExitStatus {
    match e {
        SegmentError::SegmentIntegrity { .. }
        | SegmentError::WholeFileIntegrity
        | SegmentError::Incomplete { .. }
        | SegmentError::ManifestMismatch(_) => ExitStatus::Integrity,
        SegmentError::NoSegments(_) => ExitStatus::NotFound,
        SegmentError::ZeroSegmentSize => ExitStatus::Usage,
        SegmentError::Io(e) => io_status(e),
        SegmentError::EmptyInput | SegmentError::Manifest(_) => ExitStatus::Failure,
    }
}

fn registry_status(e: &RegistryError) -> ExitStatus {
    match e {
        RegistryError::NoHandler { .. } | RegistryError::UnknownScheme { .. } => ExitStatus::NotFound,
        RegistryError::InvalidKey | RegistryError::InvalidScheme(_) | RegistryError::DuplicateScheme(_) => {
            ExitStatus::Usage
        }
        _ => ExitStatus::Failure,
    }
}

fn host_status(e: &HostError) -> ExitStatus {
    match e {
        HostError::NotFound(_) | HostError::SegmentedWithoutManifest(_) => ExitStatus::NotFound,
        HostError::Auth(_) => ExitStatus::Auth,
        HostError::Integrity(_) => ExitStatus::Integrity,
        HostError::PartialUpload { source, .. } => match host_status(source) {
            ExitStatus::Auth => ExitStatus::Auth,
            _ => ExitStatus::Failure,
        },
        HostError::Io(e) => io_status(e),
        HostError::Segments(e) => segment_status(e),
        HostError::Archive(e) => archive_status(e),
        HostError::Metadata(e) => metadata_status(e),
        HostError::Registry(e) => registry_status(e),
        HostError::SizeLimit(_) | HostError::Protocol(_) | HostError::Http { .. } => ExitStatus::Failure,
    }
}

fn p2p_status(e: &P2pError) -> ExitStatus {
    match e {
        P2pError::NoSuchChannel => ExitStatus::NotFound,
        P2pError::Integrity { .. } => ExitStatus::Integrity,
        P2pError::Rejected(msg) if msg.contains("integrity") => ExitStatus::Integrity,
        P2pError::InvalidCode(_) => ExitStatus::Usage,
        P2pError::Archive(e) => archive_status(e),
        _ => ExitStatus::Failure,
    }
}
