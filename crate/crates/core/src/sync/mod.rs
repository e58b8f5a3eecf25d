//! Differential central/handheld synchronization and the device function
//! library (link lifecycle, file operations, format conversion).

pub mod compact;
pub mod device;
pub mod link;
pub mod session;
pub mod wire;

use thiserror::Error;

pub use compact::{CompactStore, CompactTable, ConversionLoss, COMPACT_MAX_LEN};
pub use device::{serve_device, DeviceAgent, DeviceConfig};
pub use link::{DeviceLink, FolderOutcome, LinkState, PipeTransport, Transport};
pub use session::{
    decide, fetch_manifest, sync_session, ManifestEntry, SyncDirection, SyncManifest, SyncOptions, SyncReport,
    TableOutcome,
};
pub use wire::FileStat;

use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("device `{0}` unreachable")]
    DeviceUnreachable(String),
    #[error("link not connected")]
    NotConnected,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("device quota exceeded: {0}")]
    QuotaExceeded(String),
    #[error("conversion loss in {0}")]
    ConversionLoss(ConversionLoss),
    #[error("transfer digest mismatch")]
    DigestMismatch,
    #[error("sync protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for SyncError {
    fn from(e: std::io::Error) -> Self {
        SyncError::Io(e.to_string())
    }
}
