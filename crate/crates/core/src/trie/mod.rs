//! The Verkle trie: lookup, the three-stage block-update pipeline, live
//! in-place semantics and archive copy-on-write semantics with delta nodes.

mod archive;
mod batch;
mod core;
mod embedding;
mod live;
mod reference;

pub use archive::{ArchiveBlockStats, ArchiveTrie, RootIndex};
pub use batch::{partition, BatchEntry, UpdateBatch};
pub use core::{GuardSpanTracker, TrieCore};
pub use embedding::{AccountOps, KeyEmbedding};
pub use live::LiveTrie;
pub use reference::ReferenceTrie;

/// A 32-byte trie key: a 31-byte stem selecting the leaf plus a final
/// suffix byte selecting the value slot within it.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TreeKey([u8; 32]);

impl TreeKey {
    pub fn new(bytes: [u8; 32]) -> TreeKey {
        TreeKey(bytes)
    }

    pub fn from_stem_suffix(stem: [u8; 31], suffix: u8) -> TreeKey {
        let mut bytes = [0u8; 32];
        bytes[..31].copy_from_slice(&stem);
        bytes[31] = suffix;
        TreeKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn stem(&self) -> [u8; 31] {
        self.0[..31].try_into().unwrap()
    }

    pub fn suffix(&self) -> u8 {
        self.0[31]
    }
}

impl std::fmt::Debug for TreeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TreeKey(0x{})", hex::encode(self.0))
    }
}
