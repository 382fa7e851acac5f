//! Persistent record storage: positional file I/O, one fixed-size record
//! file per specialization tag with free-list reuse, an optional write-
//! behind flush buffer, and checkpointed manifests.

mod buffer;
mod file;
mod journal;
mod manager;
mod manifest;
mod node_file;

pub use buffer::FlushBuffer;
pub use file::{FileIo, PageCacheStats, PagedFile, PositionalFile, PAGE_SIZE};
pub use manager::{no_hook, CheckpointHook, CheckpointPhase, FileStoreManager, WriteStats};
pub use manifest::{manifest_path, FormatConfig, Manifest, MANIFEST_NAME};
pub use node_file::NodeFileStore;

use crate::error::Result;
use crate::nodes::NodeId;

/// Byte-level record storage shared by the file manager and the flush
/// buffer; everything above works against this trait.
pub trait NodeStore: Send + Sync {
    fn allocate(&self, tag: u8) -> Result<NodeId>;
    fn write_record(&self, id: NodeId, record: &[u8]) -> Result<()>;
    fn read_record(&self, id: NodeId) -> Result<Vec<u8>>;
    fn free_record(&self, id: NodeId) -> Result<()>;
    /// Durability point: buffered writes drained and files synced.
    fn flush(&self) -> Result<()>;
}
