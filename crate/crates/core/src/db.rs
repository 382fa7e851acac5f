//! Database assembly: wires the storage stack, node cache and trie together
//! behind create/open/checkpoint entry points.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::commitment::CommitmentEngine;
use crate::error::Result;
use crate::node_manager::NodeManager;
use crate::nodes::NodeId;
use crate::storage::{
    no_hook, CheckpointHook, FileStoreManager, FlushBuffer, FormatConfig, NodeStore,
};
use crate::trie::{ArchiveBlockStats, ArchiveTrie, LiveTrie, RootIndex, TreeKey, UpdateBatch};

/// Runtime knobs; the on-disk format facts live in [`FormatConfig`] and are
/// fixed at creation.
#[derive(Clone, Debug)]
pub struct DbOptions {
    /// Node-cache capacity, counted in nodes.
    pub cache_capacity: usize,
    /// Write-behind flush buffer: (buffered records, drain workers).
    pub flush_buffer: Option<(usize, usize)>,
    /// Page-cache proxy in front of each data file, in 4 KiB pages.
    pub page_cache_pages: Option<usize>,
    /// Dirty-set size at which commitment recomputation goes parallel.
    pub parallel_threshold: usize,
}

impl Default for DbOptions {
    fn default() -> Self {
        DbOptions {
            cache_capacity: 65_536,
            flush_buffer: None,
            page_cache_pages: None,
            parallel_threshold: 64,
        }
    }
}

struct Stack {
    store: Arc<FileStoreManager>,
    buffer: Option<Arc<FlushBuffer>>,
    manager: NodeManager,
    engine: Arc<CommitmentEngine>,
}

fn build_stack(store: FileStoreManager, options: &DbOptions) -> Result<Stack> {
    let store = Arc::new(store);
    let layout = Arc::new(store.layout().clone());
    let engine = CommitmentEngine::new(&store.format().seed)?;
    let (buffer, top): (Option<Arc<FlushBuffer>>, Arc<dyn NodeStore>) = match options.flush_buffer {
        Some((capacity, workers)) => {
            let buffer = FlushBuffer::new(store.clone(), capacity, workers);
            (Some(buffer.clone()), buffer)
        }
        None => (None, store.clone()),
    };
    let manager = NodeManager::new(options.cache_capacity, top, layout);
    Ok(Stack {
        store,
        buffer,
        manager,
        engine,
    })
}

/// The live database: one mutable image of the current state.
pub struct LiveDb {
    store: Arc<FileStoreManager>,
    buffer: Option<Arc<FlushBuffer>>,
    trie: LiveTrie,
    blocks: AtomicU64,
}

impl LiveDb {
    pub fn create(dir: &Path, format: FormatConfig, options: &DbOptions) -> Result<LiveDb> {
        let store = FileStoreManager::create(dir, format, options.page_cache_pages)?;
        Self::assemble(store, options)
    }

    pub fn open(dir: &Path, options: &DbOptions) -> Result<LiveDb> {
        let store = FileStoreManager::open(dir, options.page_cache_pages)?;
        Self::assemble(store, options)
    }

    fn assemble(store: FileStoreManager, options: &DbOptions) -> Result<LiveDb> {
        let (blocks, root, _) = store.last_checkpoint();
        let stack = build_stack(store, options)?;
        let core = crate::trie::TrieCore::new(stack.manager, stack.engine, options.parallel_threshold);
        Ok(LiveDb {
            store: stack.store,
            buffer: stack.buffer,
            trie: LiveTrie::new(core, root),
            blocks: AtomicU64::new(blocks),
        })
    }

    pub fn trie(&self) -> &LiveTrie {
        &self.trie
    }

    pub fn store(&self) -> &Arc<FileStoreManager> {
        &self.store
    }

    pub fn blocks(&self) -> u64 {
        self.blocks.load(Ordering::Acquire)
    }

    pub fn lookup(&self, key: &TreeKey) -> Result<Option<[u8; 32]>> {
        self.trie.lookup(key)
    }

    pub fn root_commitment(&self) -> Result<[u8; 32]> {
        self.trie.root_commitment()
    }

    pub fn apply_block(&self, batch: &UpdateBatch) -> Result<[u8; 32]> {
        self.store.write_stats().begin_epoch();
        let commitment = self.trie.apply_block(batch)?;
        self.blocks.fetch_add(1, Ordering::AcqRel);
        Ok(commitment)
    }

    pub fn checkpoint(&self) -> Result<()> {
        self.checkpoint_with_hook(&no_hook)
    }

    /// Checkpoint with a test hook between the phases: dirty nodes are
    /// persisted, the buffer drained and files synced, then the manifest is
    /// atomically replaced.
    pub fn checkpoint_with_hook(&self, hook: CheckpointHook) -> Result<()> {
        self.trie.core().manager.flush_all()?;
        if let Some(buffer) = &self.buffer {
            buffer.flush()?;
        }
        let root = self.trie.root();
        let commitment = self.trie.root_commitment()?;
        self.store
            .checkpoint(self.blocks(), root, commitment, hook)
    }
}

/// The archive database: append-only, queryable at every height.
pub struct ArchiveDb {
    store: Arc<FileStoreManager>,
    buffer: Option<Arc<FlushBuffer>>,
    trie: ArchiveTrie,
}

impl ArchiveDb {
    pub fn create(dir: &Path, format: FormatConfig, options: &DbOptions) -> Result<ArchiveDb> {
        let store = FileStoreManager::create(dir, format, options.page_cache_pages)?;
        Self::assemble(store, options)
    }

    pub fn open(dir: &Path, options: &DbOptions) -> Result<ArchiveDb> {
        let store = FileStoreManager::open(dir, options.page_cache_pages)?;
        Self::assemble(store, options)
    }

    fn assemble(store: FileStoreManager, options: &DbOptions) -> Result<ArchiveDb> {
        let (blocks, _, _) = store.last_checkpoint();
        let dir = store.dir().to_path_buf();
        let delta_inner = store.format().delta_inner;
        let delta_leaf = store.format().delta_leaf;
        let stack = build_stack(store, options)?;
        let core = crate::trie::TrieCore::new(stack.manager, stack.engine, options.parallel_threshold);
        let index = RootIndex::open(&dir, blocks)?;
        Ok(ArchiveDb {
            store: stack.store,
            buffer: stack.buffer,
            trie: ArchiveTrie::new(core, index, delta_inner, delta_leaf),
        })
    }

    pub fn trie(&self) -> &ArchiveTrie {
        &self.trie
    }

    pub fn store(&self) -> &Arc<FileStoreManager> {
        &self.store
    }

    pub fn blocks(&self) -> u64 {
        self.trie.blocks()
    }

    pub fn lookup_at(&self, key: &TreeKey, height: u64) -> Result<Option<[u8; 32]>> {
        self.trie.lookup_at(key, height)
    }

    pub fn apply_block(&self, batch: &UpdateBatch, height: u64) -> Result<(NodeId, [u8; 32])> {
        self.store.write_stats().begin_epoch();
        self.trie.apply_block(batch, height)
    }

    pub fn last_block_stats(&self) -> ArchiveBlockStats {
        self.trie.last_block_stats()
    }

    pub fn checkpoint(&self) -> Result<()> {
        self.checkpoint_with_hook(&no_hook)
    }

    pub fn checkpoint_with_hook(&self, hook: CheckpointHook) -> Result<()> {
        self.trie.core().manager.flush_all()?;
        if let Some(buffer) = &self.buffer {
            buffer.flush()?;
        }
        self.trie.index().sync()?;
        let blocks = self.trie.blocks();
        let root = self.trie.latest_root();
        let commitment = if blocks == 0 {
            [0u8; 32]
        } else {
            self.trie.commitment_at(blocks - 1)?
        };
        self.store.checkpoint(blocks, root, commitment, hook)
    }
}
