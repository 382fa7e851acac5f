//! Multiplexes the per-tag node files behind one record store and drives
//! checkpoint creation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::nodes::{NodeId, NodeLayout};
use crate::storage::file::{FileIo, PagedFile, PositionalFile};
use crate::storage::journal::UndoJournal;
use crate::storage::manifest::{FormatConfig, Manifest};
use crate::storage::node_file::NodeFileStore;
use crate::storage::NodeStore;

/// Per-epoch write-amplification instrumentation: tracks how often each id
/// is written within the current epoch (one epoch per block in tests).
#[derive(Default)]
pub struct WriteStats {
    epoch: AtomicU64,
    per_id: Mutex<HashMap<u64, (u64, u32)>>,
    max_in_epoch: AtomicU32,
    total: AtomicU64,
}

impl WriteStats {
    fn record(&self, id: NodeId) {
        self.total.fetch_add(1, Ordering::Relaxed);
        let epoch = self.epoch.load(Ordering::Relaxed);
        let mut map = self.per_id.lock();
        let entry = map.entry(id.to_u64()).or_insert((epoch, 0));
        if entry.0 != epoch {
            *entry = (epoch, 0);
        }
        entry.1 += 1;
        self.max_in_epoch.fetch_max(entry.1, Ordering::Relaxed);
    }

    /// Starts a new epoch; per-id counts reset.
    pub fn begin_epoch(&self) {
        self.epoch.fetch_add(1, Ordering::Relaxed);
        self.per_id.lock().clear();
    }

    /// Highest number of writes any single id received within one epoch
    /// since the last [`WriteStats::reset_max`].
    pub fn max_writes_per_id(&self) -> u32 {
        self.max_in_epoch.load(Ordering::Relaxed)
    }

    pub fn reset_max(&self) {
        self.max_in_epoch.store(0, Ordering::Relaxed);
    }

    pub fn total_writes(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }
}

/// Phases a checkpoint passes through; exposed so tests can inject aborts
/// between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointPhase {
    /// All data files are flushed and synced; the manifest is untouched.
    AfterDataFlush,
    /// The new manifest is written to its temp file but not yet published.
    BeforePublish,
}

pub type CheckpointHook<'a> = &'a dyn Fn(CheckpointPhase) -> Result<()>;

pub fn no_hook(_phase: CheckpointPhase) -> Result<()> {
    Ok(())
}

/// Allocation state of the last published checkpoint, used to decide which
/// record overwrites need a journaled pre-image.
struct CheckpointAlloc {
    per_tag: HashMap<u8, (u64, std::collections::HashSet<u64>)>,
}

impl CheckpointAlloc {
    fn from_tags(tags: &[(u8, u64, Vec<u64>)]) -> CheckpointAlloc {
        CheckpointAlloc {
            per_tag: tags
                .iter()
                .map(|(tag, next, free)| (*tag, (*next, free.iter().copied().collect())))
                .collect(),
        }
    }

    /// Whether the published checkpoint references this record.
    fn is_live(&self, id: NodeId) -> bool {
        match self.per_tag.get(&id.tag()) {
            Some((next, free)) => id.index() < *next && !free.contains(&id.index()),
            None => false,
        }
    }
}

/// One [`NodeFileStore`] per specialization tag, plus manifest handling.
pub struct FileStoreManager {
    dir: PathBuf,
    layout: NodeLayout,
    format: FormatConfig,
    stores: HashMap<u8, NodeFileStore>,
    checkpoint: Mutex<(u64, NodeId, [u8; 32])>,
    generation: std::sync::atomic::AtomicU64,
    checkpoint_alloc: Mutex<CheckpointAlloc>,
    journal: UndoJournal,
    write_stats: WriteStats,
}

impl FileStoreManager {
    /// Creates a fresh database directory. Fails if a manifest already
    /// exists there.
    pub fn create(
        dir: &Path,
        format: FormatConfig,
        page_cache_pages: Option<usize>,
    ) -> Result<FileStoreManager> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io("creating database directory", e))?;
        if dir.join(super::manifest::MANIFEST_NAME).exists() {
            return Err(Error::invalid(format!(
                "{} already contains a database",
                dir.display()
            )));
        }
        let layout = layout_for(&format)?;
        let stores = open_stores(dir, &layout, &HashMap::new(), page_cache_pages)?;
        let manager = FileStoreManager {
            dir: dir.to_path_buf(),
            layout,
            format,
            stores,
            checkpoint: Mutex::new((0, NodeId::NULL, [0; 32])),
            generation: std::sync::atomic::AtomicU64::new(0),
            checkpoint_alloc: Mutex::new(CheckpointAlloc {
                per_tag: HashMap::new(),
            }),
            journal: UndoJournal::new(dir, 0),
            write_stats: WriteStats::default(),
        };
        manager.manifest(0, NodeId::NULL, [0; 32]).publish(dir)?;
        Ok(manager)
    }

    /// Opens an existing database directory from its manifest.
    pub fn open(dir: &Path, page_cache_pages: Option<usize>) -> Result<FileStoreManager> {
        let manifest = Manifest::load(dir)?;
        let layout = layout_for(&manifest.format)?;
        let alloc: HashMap<u8, (u64, Vec<u64>)> = manifest
            .tags
            .iter()
            .map(|(tag, next, free)| (*tag, (*next, free.clone())))
            .collect();
        for (tag, _, _) in &manifest.tags {
            layout.info(*tag)?;
        }
        let stores = open_stores(dir, &layout, &alloc, page_cache_pages)?;

        // Undo any post-checkpoint overwrites a crashed process left behind,
        // restoring the exact record state the manifest describes.
        let undo = UndoJournal::recover(dir, manifest.generation)?;
        for (id, bytes) in undo {
            let store = stores
                .get(&id.tag())
                .ok_or_else(|| Error::Corruption(format!("journal id {id:?} has no store")))?;
            store.raw_write(id.index(), &bytes)?;
        }
        for store in stores.values() {
            store.sync()?;
        }
        let journal = UndoJournal::new(dir, manifest.generation);
        journal.reset(manifest.generation)?;

        Ok(FileStoreManager {
            dir: dir.to_path_buf(),
            layout,
            format: manifest.format,
            stores,
            checkpoint: Mutex::new((manifest.blocks, manifest.root, manifest.root_commitment)),
            generation: std::sync::atomic::AtomicU64::new(manifest.generation),
            checkpoint_alloc: Mutex::new(CheckpointAlloc::from_tags(&manifest.tags)),
            journal,
            write_stats: WriteStats::default(),
        })
    }

    pub fn layout(&self) -> &NodeLayout {
        &self.layout
    }

    pub fn format(&self) -> &FormatConfig {
        &self.format
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_stats(&self) -> &WriteStats {
        &self.write_stats
    }

    /// Last checkpointed (blocks, root, root commitment).
    pub fn last_checkpoint(&self) -> (u64, NodeId, [u8; 32]) {
        *self.checkpoint.lock()
    }

    fn store(&self, tag: u8) -> Result<&NodeFileStore> {
        self.stores
            .get(&tag)
            .ok_or_else(|| Error::Corruption(format!("no store for tag {tag}")))
    }

    fn manifest(&self, blocks: u64, root: NodeId, root_commitment: [u8; 32]) -> Manifest {
        let mut tags: Vec<(u8, u64, Vec<u64>)> = self
            .stores
            .values()
            .map(|s| {
                let (next, free) = s.alloc_snapshot();
                (s.tag(), next, free)
            })
            .collect();
        tags.sort_by_key(|(tag, _, _)| *tag);
        Manifest {
            format: self.format.clone(),
            generation: self.generation.load(Ordering::Acquire),
            blocks,
            root,
            root_commitment,
            tags,
        }
    }

    /// Creates a consistent checkpoint: data files are synced first, then
    /// the manifest is written to a temp file and atomically renamed into
    /// place. The hook is called between the phases; any error aborts the
    /// checkpoint with the previous manifest still published.
    pub fn checkpoint(
        &self,
        blocks: u64,
        root: NodeId,
        root_commitment: [u8; 32],
        hook: CheckpointHook,
    ) -> Result<()> {
        for store in self.stores.values() {
            store.sync()?;
        }
        hook(CheckpointPhase::AfterDataFlush)?;
        // publish() itself writes tmp + fsync + rename; we expose the
        // pre-publish phase by preparing the manifest first.
        let mut manifest = self.manifest(blocks, root, root_commitment);
        manifest.generation += 1;
        hook(CheckpointPhase::BeforePublish)?;
        manifest.publish(&self.dir)?;
        self.generation.store(manifest.generation, Ordering::Release);
        *self.checkpoint.lock() = (blocks, root, root_commitment);
        *self.checkpoint_alloc.lock() = CheckpointAlloc::from_tags(&manifest.tags);
        // The old journal protected the superseded checkpoint.
        self.journal.reset(manifest.generation)?;
        Ok(())
    }

    /// Per-tag (tag, record_size, total slots, reusable slots, file bytes).
    pub fn tag_stats(&self) -> Vec<(u8, usize, u64, u64, u64)> {
        let mut rows: Vec<_> = self
            .stores
            .values()
            .map(|s| {
                let (total, reusable) = s.slot_counts();
                (s.tag(), s.record_size(), total, reusable, s.file_bytes())
            })
            .collect();
        rows.sort_by_key(|r| r.0);
        rows
    }

    /// Total logical bytes across all data files.
    pub fn total_file_bytes(&self) -> u64 {
        self.stores.values().map(|s| s.file_bytes()).sum()
    }
}

impl NodeStore for FileStoreManager {
    fn allocate(&self, tag: u8) -> Result<NodeId> {
        self.store(tag)?.allocate()
    }

    fn write_record(&self, id: NodeId, record: &[u8]) -> Result<()> {
        self.write_stats.record(id);
        let store = self.store(id.tag())?;
        // Overwriting a record the published checkpoint references requires
        // its pre-image to be durable first.
        if self.checkpoint_alloc.lock().is_live(id) {
            let preimage = store.raw_read(id.index())?;
            self.journal.ensure_preimage(id, &preimage)?;
        }
        store.write(id, record)
    }

    fn read_record(&self, id: NodeId) -> Result<Vec<u8>> {
        self.store(id.tag())?.read(id)
    }

    fn free_record(&self, id: NodeId) -> Result<()> {
        self.store(id.tag())?.free(id)
    }

    fn flush(&self) -> Result<()> {
        for store in self.stores.values() {
            store.sync()?;
        }
        Ok(())
    }
}

fn layout_for(format: &FormatConfig) -> Result<NodeLayout> {
    NodeLayout::new(
        &format.leaf_capacities,
        &format.inner_capacities,
        format.tau,
    )
}

fn open_stores(
    dir: &Path,
    layout: &NodeLayout,
    alloc: &HashMap<u8, (u64, Vec<u64>)>,
    page_cache_pages: Option<usize>,
) -> Result<HashMap<u8, NodeFileStore>> {
    let mut stores = HashMap::new();
    for info in layout.all_tags() {
        let path = dir.join(format!("nodes-{}.dat", info.tag));
        let base = PositionalFile::open(&path)?;
        let file: Box<dyn FileIo> = match page_cache_pages {
            Some(pages) => Box::new(PagedFile::new(base, pages)),
            None => Box::new(base),
        };
        let (next, free) = alloc.get(&info.tag).cloned().unwrap_or((0, Vec::new()));
        stores.insert(
            info.tag,
            NodeFileStore::new(info.tag, info.record_size, file, next, free),
        );
    }
    Ok(stores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nodes::{encode_node, LeafNode, Node, NodeKind};

    fn manager(dir: &Path) -> FileStoreManager {
        FileStoreManager::create(dir, FormatConfig::default(), None).unwrap()
    }

    fn sample_leaf_record(m: &FileStoreManager) -> (u8, Vec<u8>) {
        let mut leaf = LeafNode::new([9; 31]);
        leaf.set_value(4, Some([1; 32]));
        let tag = m.layout().required_tag(NodeKind::Leaf, 1).unwrap();
        let record = encode_node(&Node::Leaf(Box::new(leaf)), tag, m.layout()).unwrap();
        (tag, record)
    }

    #[test]
    fn create_then_open_preserves_allocation_state() {
        let dir = tempfile::tempdir().unwrap();
        let (tag, record) = {
            let m = manager(dir.path());
            let (tag, record) = sample_leaf_record(&m);
            let a = m.allocate(tag).unwrap();
            let b = m.allocate(tag).unwrap();
            m.write_record(a, &record).unwrap();
            m.write_record(b, &record).unwrap();
            m.free_record(a).unwrap();
            m.checkpoint(1, b, [3; 32], &no_hook).unwrap();
            (tag, record)
        };

        let m = FileStoreManager::open(dir.path(), None).unwrap();
        let (blocks, root, rc) = m.last_checkpoint();
        assert_eq!(blocks, 1);
        assert_eq!(root, NodeId::new(tag, 1));
        assert_eq!(rc, [3; 32]);
        // The freed index is reused first.
        assert_eq!(m.allocate(tag).unwrap(), NodeId::new(tag, 0));
        assert_eq!(m.read_record(NodeId::new(tag, 1)).unwrap(), record);
    }

    #[test]
    fn checkpoint_abort_leaves_previous_manifest_valid() {
        let dir = tempfile::tempdir().unwrap();
        let m = manager(dir.path());
        let (tag, record) = sample_leaf_record(&m);
        let id = m.allocate(tag).unwrap();
        m.write_record(id, &record).unwrap();
        m.checkpoint(1, id, [1; 32], &no_hook).unwrap();

        let id2 = m.allocate(tag).unwrap();
        m.write_record(id2, &record).unwrap();
        let fail = |phase: CheckpointPhase| {
            if phase == CheckpointPhase::AfterDataFlush {
                Err(Error::invalid("injected abort"))
            } else {
                Ok(())
            }
        };
        assert!(m.checkpoint(2, id2, [2; 32], &fail).is_err());

        let reopened = FileStoreManager::open(dir.path(), None).unwrap();
        assert_eq!(reopened.last_checkpoint(), (1, id, [1; 32]));
    }

    #[test]
    fn create_refuses_existing_database() {
        let dir = tempfile::tempdir().unwrap();
        let _m = manager(dir.path());
        assert!(FileStoreManager::create(dir.path(), FormatConfig::default(), None).is_err());
    }

    #[test]
    fn write_stats_track_per_epoch_amplification() {
        let dir = tempfile::tempdir().unwrap();
        let m = manager(dir.path());
        let (tag, record) = sample_leaf_record(&m);
        let id = m.allocate(tag).unwrap();
        m.write_stats().begin_epoch();
        m.write_record(id, &record).unwrap();
        assert_eq!(m.write_stats().max_writes_per_id(), 1);
        m.write_stats().begin_epoch();
        m.write_record(id, &record).unwrap();
        assert_eq!(m.write_stats().max_writes_per_id(), 1);
        m.write_record(id, &record).unwrap();
        assert_eq!(m.write_stats().max_writes_per_id(), 2);
    }
}
