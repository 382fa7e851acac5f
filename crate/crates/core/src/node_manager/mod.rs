//! The node manager: owner of all in-memory node instances.
//!
//! Nodes live in a fixed-size slot array so guards have stable addresses
//! for their whole lifetime; a map from id to slot position tracks
//! residency. At most one in-memory instance exists per id, handed out
//! through shared-read or exclusive-write guards. A node is pinned while
//! any guard is outstanding and is never evicted pinned; evicting a dirty
//! node persists it first. Mutating through a write guard marks the node
//! dirty; clean evictions perform no storage writes.
//!
//! Eviction is clock-style second chance over the unpinned slots.
//! Loading a delta node resolves its base through the cache (one extra
//! record load at most) and materializes the full view before the node is
//! exposed.

use std::collections::HashMap;
use std::mem::ManuallyDrop;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::error::{Error, Result};
use crate::nodes::{decode_node, encode_node, materialize_delta, Node, NodeId, NodeLayout};
use crate::storage::NodeStore;

struct CellState {
    id: NodeId,
    node: Option<Node>,
    dirty: bool,
}

struct Slot {
    cell: RwLock<CellState>,
    pins: AtomicUsize,
    referenced: AtomicBool,
}

struct CacheIndex {
    map: HashMap<NodeId, usize>,
    slot_ids: Vec<NodeId>,
    free: Vec<usize>,
    next_unused: usize,
    hand: usize,
}

/// Operation counters; exposed for instrumentation-based tests and the
/// stats report.
#[derive(Default)]
pub struct Counters {
    /// Records fetched from the storage backend (cache misses).
    pub loads: AtomicU64,
    pub hits: AtomicU64,
    pub evictions: AtomicU64,
    pub writebacks: AtomicU64,
    pub creates: AtomicU64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub loads: u64,
    pub hits: u64,
    pub evictions: u64,
    pub writebacks: u64,
    pub creates: u64,
}

pub struct NodeManager {
    slots: Box<[Slot]>,
    index: Mutex<CacheIndex>,
    store: Arc<dyn NodeStore>,
    layout: Arc<NodeLayout>,
    counters: Counters,
}

impl NodeManager {
    pub fn new(capacity: usize, store: Arc<dyn NodeStore>, layout: Arc<NodeLayout>) -> NodeManager {
        assert!(capacity > 0);
        let slots = (0..capacity)
            .map(|_| Slot {
                cell: RwLock::new(CellState {
                    id: NodeId::NULL,
                    node: None,
                    dirty: false,
                }),
                pins: AtomicUsize::new(0),
                referenced: AtomicBool::new(false),
            })
            .collect();
        NodeManager {
            slots,
            index: Mutex::new(CacheIndex {
                map: HashMap::new(),
                slot_ids: vec![NodeId::NULL; capacity],
                free: Vec::new(),
                next_unused: 0,
                hand: 0,
            }),
            store,
            layout,
            counters: Counters::default(),
        }
    }

    pub fn layout(&self) -> &NodeLayout {
        &self.layout
    }

    pub fn store(&self) -> &Arc<dyn NodeStore> {
        &self.store
    }

    pub fn counters(&self) -> CounterSnapshot {
        CounterSnapshot {
            loads: self.counters.loads.load(Ordering::Relaxed),
            hits: self.counters.hits.load(Ordering::Relaxed),
            evictions: self.counters.evictions.load(Ordering::Relaxed),
            writebacks: self.counters.writebacks.load(Ordering::Relaxed),
            creates: self.counters.creates.load(Ordering::Relaxed),
        }
    }

    /// Shared read access; loads (and for deltas, materializes) the node on
    /// a cache miss.
    pub fn get_read(&self, id: NodeId) -> Result<ReadGuard<'_>> {
        if let Some(guard) = self.try_pin_read(id) {
            return Ok(guard);
        }
        let node = self.load(id)?;
        match self.install(id, node, false)? {
            Installed::Write(pos, guard) => Ok(ReadGuard {
                manager: self,
                pos,
                guard: ManuallyDrop::new(RwLockWriteGuard::downgrade(guard)),
            }),
            Installed::Raced => self.get_read(id),
        }
    }

    /// Exclusive write access. While the guard exists no other reference to
    /// the node exists; mutating through it marks the node dirty.
    pub fn get_write(&self, id: NodeId) -> Result<WriteGuard<'_>> {
        if let Some(guard) = self.try_pin_write(id) {
            return Ok(guard);
        }
        let node = self.load(id)?;
        match self.install(id, node, false)? {
            Installed::Write(pos, guard) => Ok(WriteGuard {
                manager: self,
                pos,
                guard: ManuallyDrop::new(guard),
            }),
            Installed::Raced => self.get_write(id),
        }
    }

    /// Allocates a new id for the node's tag, inserts the node pinned and
    /// dirty, and returns the id together with a write guard.
    pub fn create(&self, node: Node, tag: u8) -> Result<(NodeId, WriteGuard<'_>)> {
        let id = self.store.allocate(tag)?;
        self.counters.creates.fetch_add(1, Ordering::Relaxed);
        match self.install(id, node, true)? {
            Installed::Write(pos, guard) => Ok((
                id,
                WriteGuard {
                    manager: self,
                    pos,
                    guard: ManuallyDrop::new(guard),
                },
            )),
            Installed::Raced => Err(Error::Corruption(format!(
                "freshly allocated id {id:?} already resident"
            ))),
        }
    }

    /// Removes a node from cache and frees its storage slot. The id must
    /// have no outstanding guards.
    pub fn delete(&self, id: NodeId) -> Result<()> {
        {
            let mut index = self.index.lock();
            if let Some(&pos) = index.map.get(&id) {
                if self.slots[pos].pins.load(Ordering::Acquire) > 0 {
                    return Err(Error::ContractViolation(format!(
                        "delete of {id:?} with outstanding guards"
                    )));
                }
                let mut cell = self.slots[pos]
                    .cell
                    .try_write()
                    .ok_or_else(|| Error::ContractViolation(format!("delete of locked {id:?}")))?;
                cell.node = None;
                cell.dirty = false;
                cell.id = NodeId::NULL;
                drop(cell);
                index.map.remove(&id);
                index.slot_ids[pos] = NodeId::NULL;
                index.free.push(pos);
            }
        }
        self.store.free_record(id)
    }

    /// Persists every dirty cached node and clears the dirty set. Callers
    /// must not hold write guards.
    pub fn flush_all(&self) -> Result<()> {
        let positions: Vec<usize> = {
            let index = self.index.lock();
            index.map.values().copied().collect()
        };
        for pos in positions {
            let mut cell = self.slots[pos].cell.write();
            if cell.dirty {
                if let Some(node) = &cell.node {
                    self.writeback(cell.id, node)?;
                }
                cell.dirty = false;
            }
        }
        Ok(())
    }

    /// True if the id is currently resident; test instrumentation.
    pub fn resident(&self, id: NodeId) -> bool {
        self.index.lock().map.contains_key(&id)
    }

    fn try_pin_read(&self, id: NodeId) -> Option<ReadGuard<'_>> {
        let pos = self.pin_hit(id)?;
        let guard = self.slots[pos].cell.read();
        debug_assert_eq!(guard.id, id);
        Some(ReadGuard {
            manager: self,
            pos,
            guard: ManuallyDrop::new(guard),
        })
    }

    fn try_pin_write(&self, id: NodeId) -> Option<WriteGuard<'_>> {
        let pos = self.pin_hit(id)?;
        let guard = self.slots[pos].cell.write();
        debug_assert_eq!(guard.id, id);
        Some(WriteGuard {
            manager: self,
            pos,
            guard: ManuallyDrop::new(guard),
        })
    }

    /// Pins the slot holding `id`, if resident. The pin is taken under the
    /// index lock, which is what keeps eviction from selecting the slot
    /// between lookup and lock acquisition.
    fn pin_hit(&self, id: NodeId) -> Option<usize> {
        let index = self.index.lock();
        let pos = *index.map.get(&id)?;
        self.slots[pos].pins.fetch_add(1, Ordering::AcqRel);
        self.slots[pos].referenced.store(true, Ordering::Relaxed);
        self.counters.hits.fetch_add(1, Ordering::Relaxed);
        Some(pos)
    }

    /// Loads and decodes a record; delta nodes resolve their base through
    /// the cache and come back materialized.
    fn load(&self, id: NodeId) -> Result<Node> {
        self.counters.loads.fetch_add(1, Ordering::Relaxed);
        let bytes = self.store.read_record(id)?;
        let mut node = decode_node(id.tag(), &bytes, &self.layout)?;
        if let Node::Delta(delta) = &mut node {
            let base = self.get_read(delta.base)?;
            materialize_delta(delta, &base)?;
        }
        Ok(node)
    }

    /// Installs a node into a slot, pinned, holding the slot's write lock.
    /// Returns [`Installed::Raced`] when another thread installed the same
    /// id concurrently; callers then take the hit path.
    fn install(&self, id: NodeId, node: Node, dirty: bool) -> Result<Installed<'_>> {
        let pos = {
            let mut index = self.index.lock();
            if index.map.contains_key(&id) {
                return Ok(Installed::Raced);
            }
            self.claim_slot(&mut index)?
        };

        let mut cell = self.slots[pos].cell.write();
        if cell.dirty {
            if let Some(old) = cell.node.take() {
                self.counters.writebacks.fetch_add(1, Ordering::Relaxed);
                if let Err(e) = self.writeback(cell.id, &old) {
                    cell.node = Some(old);
                    drop(cell);
                    self.index.lock().free.push(pos);
                    return Err(e);
                }
            }
        }
        cell.id = id;
        cell.node = Some(node);
        cell.dirty = dirty;

        let mut index = self.index.lock();
        if index.map.contains_key(&id) {
            cell.id = NodeId::NULL;
            cell.node = None;
            cell.dirty = false;
            index.free.push(pos);
            return Ok(Installed::Raced);
        }
        index.map.insert(id, pos);
        index.slot_ids[pos] = id;
        self.slots[pos].pins.store(1, Ordering::Release);
        self.slots[pos].referenced.store(true, Ordering::Relaxed);
        Ok(Installed::Write(pos, cell))
    }

    /// Picks a slot for a new node: free slot, unused slot, or clock-evicted
    /// victim. The returned slot is unmapped (invisible to lookups) and
    /// unpinned; any dirty victim content is still in the cell for the
    /// caller to write back.
    fn claim_slot(&self, index: &mut CacheIndex) -> Result<usize> {
        if let Some(pos) = index.free.pop() {
            return Ok(pos);
        }
        if index.next_unused < self.slots.len() {
            let pos = index.next_unused;
            index.next_unused += 1;
            return Ok(pos);
        }
        // Clock second-chance over occupied, unpinned slots.
        let capacity = self.slots.len();
        for _ in 0..2 * capacity {
            let pos = index.hand;
            index.hand = (index.hand + 1) % capacity;
            if index.slot_ids[pos].is_null() {
                continue;
            }
            if self.slots[pos].pins.load(Ordering::Acquire) > 0 {
                continue;
            }
            if self.slots[pos].referenced.swap(false, Ordering::Relaxed) {
                continue;
            }
            let victim = index.slot_ids[pos];
            index.map.remove(&victim);
            index.slot_ids[pos] = NodeId::NULL;
            self.counters.evictions.fetch_add(1, Ordering::Relaxed);
            return Ok(pos);
        }
        Err(Error::CacheFull)
    }

    fn writeback(&self, id: NodeId, node: &Node) -> Result<()> {
        let record = encode_node(node, id.tag(), &self.layout)?;
        self.store.write_record(id, &record)
    }

    fn unpin(&self, pos: usize) {
        self.slots[pos].pins.fetch_sub(1, Ordering::AcqRel);
    }
}

enum Installed<'a> {
    Write(usize, RwLockWriteGuard<'a, CellState>),
    Raced,
}

/// Shared read access to a cached node. The node stays pinned until drop.
pub struct ReadGuard<'a> {
    manager: &'a NodeManager,
    pos: usize,
    guard: ManuallyDrop<RwLockReadGuard<'a, CellState>>,
}

impl Deref for ReadGuard<'_> {
    type Target = Node;

    fn deref(&self) -> &Node {
        self.guard.node.as_ref().expect("guarded cell holds a node")
    }
}

impl Drop for ReadGuard<'_> {
    fn drop(&mut self) {
        // Release the lock before the pin so an unpinned slot is never
        // lock-held.
        unsafe { ManuallyDrop::drop(&mut self.guard) };
        self.manager.unpin(self.pos);
    }
}

/// Exclusive access to a cached node. Mutating through the guard marks the
/// node dirty; dirty nodes are persisted on eviction or flush.
pub struct WriteGuard<'a> {
    manager: &'a NodeManager,
    pos: usize,
    guard: ManuallyDrop<RwLockWriteGuard<'a, CellState>>,
}

impl WriteGuard<'_> {
    /// Mutable access without marking dirty; for memory-only bookkeeping
    /// (commitment caches, dirty-slot tracks) that must not force a
    /// storage write on its own.
    pub fn node_mut_untracked(&mut self) -> &mut Node {
        self.guard.node.as_mut().expect("guarded cell holds a node")
    }
}

impl Deref for WriteGuard<'_> {
    type Target = Node;

    fn deref(&self) -> &Node {
        self.guard.node.as_ref().expect("guarded cell holds a node")
    }
}

impl DerefMut for WriteGuard<'_> {
    fn deref_mut(&mut self) -> &mut Node {
        self.guard.dirty = true;
        self.guard.node.as_mut().expect("guarded cell holds a node")
    }
}

impl Drop for WriteGuard<'_> {
    fn drop(&mut self) {
        unsafe { ManuallyDrop::drop(&mut self.guard) };
        self.manager.unpin(self.pos);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nodes::{LeafNode, NodeKind};
    use crate::storage::{FileStoreManager, FormatConfig};

    fn setup(capacity: usize) -> (tempfile::TempDir, Arc<FileStoreManager>, NodeManager) {
        let dir = tempfile::tempdir().unwrap();
        let store =
            Arc::new(FileStoreManager::create(dir.path(), FormatConfig::default(), None).unwrap());
        let layout = Arc::new(store.layout().clone());
        let manager = NodeManager::new(capacity, store.clone(), layout);
        (dir, store, manager)
    }

    fn leaf_node(stem_byte: u8) -> (Node, u16) {
        let mut leaf = LeafNode::new([stem_byte; 31]);
        leaf.set_value(1, Some([stem_byte; 32]));
        (Node::Leaf(Box::new(leaf)), 1)
    }

    #[test]
    fn create_then_read_returns_same_node() {
        let (_dir, _store, manager) = setup(8);
        let (node, occ) = leaf_node(3);
        let tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
        let (id, guard) = manager.create(node, tag).unwrap();
        drop(guard);
        let read = manager.get_read(id).unwrap();
        let Node::Leaf(leaf) = &*read else { panic!() };
        assert_eq!(leaf.stem, [3; 31]);
    }

    #[test]
    fn repeated_reads_hit_the_same_instance() {
        let (_dir, _store, manager) = setup(8);
        let (node, occ) = leaf_node(4);
        let tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
        let (id, guard) = manager.create(node, tag).unwrap();
        drop(guard);

        let before = manager.counters();
        let a = manager.get_read(id).unwrap();
        let addr_a = &*a as *const Node;
        drop(a);
        let b = manager.get_read(id).unwrap();
        let addr_b = &*b as *const Node;
        drop(b);
        assert_eq!(addr_a, addr_b);
        let after = manager.counters();
        assert_eq!(after.loads, before.loads); // both were cache hits
        assert_eq!(after.hits, before.hits + 2);
    }

    #[test]
    fn write_guard_excludes_readers() {
        let (_dir, _store, manager) = setup(8);
        let (node, occ) = leaf_node(5);
        let tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
        let (id, guard) = manager.create(node, tag).unwrap();
        drop(guard);

        let manager = Arc::new(manager);
        let write = manager.get_write(id).unwrap();
        let concurrent = {
            let manager = manager.clone();
            std::thread::spawn(move || {
                let _read = manager.get_read(id).unwrap();
                std::time::Instant::now()
            })
        };
        std::thread::sleep(std::time::Duration::from_millis(50));
        let released_at = std::time::Instant::now();
        drop(write);
        let acquired_at = concurrent.join().unwrap();
        assert!(acquired_at >= released_at);
    }

    #[test]
    fn eviction_persists_dirty_nodes_and_all_remain_readable() {
        let (_dir, store, manager) = setup(4);
        let mut ids = Vec::new();
        for i in 0..8u8 {
            let (node, occ) = leaf_node(i);
            let tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
            let (id, guard) = manager.create(node, tag).unwrap();
            drop(guard);
            ids.push(id);
        }
        assert!(manager.counters().evictions >= 4);
        assert!(store.write_stats().total_writes() >= 4);
        for (i, id) in ids.iter().enumerate() {
            let read = manager.get_read(*id).unwrap();
            let Node::Leaf(leaf) = &*read else { panic!() };
            assert_eq!(leaf.stem, [i as u8; 31]);
        }
    }

    #[test]
    fn clean_nodes_evict_without_storage_writes() {
        let (_dir, store, manager) = setup(2);
        let mut ids = Vec::new();
        for i in 0..2u8 {
            let (node, occ) = leaf_node(i);
            let tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
            let (id, guard) = manager.create(node, tag).unwrap();
            drop(guard);
            ids.push(id);
        }
        manager.flush_all().unwrap();
        let writes_after_flush = store.write_stats().total_writes();

        // Cycle clean nodes through the cache; no further writes occur.
        for _ in 0..3 {
            for id in &ids {
                drop(manager.get_read(*id).unwrap());
            }
            let (node, occ) = leaf_node(9);
            let tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
            let (id, guard) = manager.create(node, tag).unwrap();
            drop(guard);
            manager.flush_all().unwrap();
            manager.delete(id).unwrap();
        }
        // Only the explicitly created node was written (once per cycle).
        assert_eq!(store.write_stats().total_writes(), writes_after_flush + 3);
    }

    #[test]
    fn pinned_nodes_are_never_evicted() {
        let (_dir, _store, manager) = setup(2);
        let (node, occ) = leaf_node(1);
        let tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
        let (id_a, guard_a) = manager.create(node, tag).unwrap();

        // Fill the rest of the cache and force evictions; the pinned node
        // must survive.
        for i in 2..6u8 {
            let (node, occ) = leaf_node(i);
            let tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
            let (_id, guard) = manager.create(node, tag).unwrap();
            drop(guard);
        }
        assert!(manager.resident(id_a));
        drop(guard_a);
    }

    #[test]
    fn cache_of_only_pinned_nodes_reports_exhaustion() {
        let (_dir, _store, manager) = setup(2);
        let mut guards = Vec::new();
        for i in 0..2u8 {
            let (node, occ) = leaf_node(i);
            let tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
            guards.push(manager.create(node, tag).unwrap());
        }
        let (node, occ) = leaf_node(9);
        let tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
        assert!(matches!(manager.create(node, tag), Err(Error::CacheFull)));
    }

    #[test]
    fn delete_removes_from_cache_and_storage() {
        let (_dir, _store, manager) = setup(8);
        let (node, occ) = leaf_node(7);
        let tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
        let (id, guard) = manager.create(node, tag).unwrap();
        drop(guard);
        manager.delete(id).unwrap();
        assert!(matches!(manager.get_read(id), Err(Error::NotFound)));
        // The freed slot is reused by the next allocation of that tag.
        let (node, _) = leaf_node(8);
        let (id2, guard) = manager.create(node, tag).unwrap();
        drop(guard);
        assert_eq!(id2, id);
    }

    #[test]
    fn delete_with_outstanding_guard_is_a_contract_violation() {
        let (_dir, _store, manager) = setup(8);
        let (node, occ) = leaf_node(7);
        let tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
        let (id, guard) = manager.create(node, tag).unwrap();
        assert!(matches!(
            manager.delete(id),
            Err(Error::ContractViolation(_))
        ));
        drop(guard);
        manager.delete(id).unwrap();
    }

    #[test]
    fn flush_persists_dirty_state_visible_to_bypass_reads() {
        let (_dir, store, manager) = setup(8);
        let (node, _) = leaf_node(1);
        // Room for the second value written below.
        let tag = manager.layout().required_tag(NodeKind::Leaf, 2).unwrap();
        let (id, mut guard) = manager.create(node, tag).unwrap();
        {
            let Node::Leaf(leaf) = &mut *guard else { panic!() };
            leaf.set_value(9, Some([42; 32]));
        }
        drop(guard);
        manager.flush_all().unwrap();

        // Bypass the cache: decode the record straight from storage.
        let bytes = store.read_record(id).unwrap();
        let Node::Leaf(leaf) = decode_node(id.tag(), &bytes, manager.layout()).unwrap() else {
            panic!()
        };
        assert_eq!(leaf.value(9), Some([42; 32]));

        // A second flush performs no further writes.
        let before = store.write_stats().total_writes();
        manager.flush_all().unwrap();
        assert_eq!(store.write_stats().total_writes(), before);
    }

    #[test]
    fn loading_a_delta_costs_exactly_two_record_loads() {
        use crate::nodes::{DeltaNode, DeltaView, NodeKind};
        let (_dir, store, manager) = setup(8);

        // Base leaf written directly to storage.
        let (base_node, occ) = leaf_node(1);
        let base_tag = manager.layout().required_tag(NodeKind::Leaf, occ).unwrap();
        let (base_id, guard) = manager.create(base_node, base_tag).unwrap();
        drop(guard);
        manager.flush_all().unwrap();

        // Delta referencing the base, written bypassing the cache.
        let delta = DeltaNode {
            kind: NodeKind::Leaf,
            base: base_id,
            applied: 1,
            entries: vec![(7, [9; 32])],
            view: DeltaView::Leaf(LeafNode::new([0; 31])),
            commitment_known: false,
        };
        let delta_tag = manager.layout().delta_tag(NodeKind::Leaf, 1).unwrap();
        let delta_id = store.allocate(delta_tag).unwrap();
        let record = encode_node(
            &Node::Delta(Box::new(delta)),
            delta_tag,
            manager.layout(),
        )
        .unwrap();
        store.write_record(delta_id, &record).unwrap();

        // Evict everything by flushing and rebuilding a cold manager.
        let cold = NodeManager::new(8, manager.store().clone(), Arc::new(manager.layout().clone()));
        let before = cold.counters().loads;
        let read = cold.get_read(delta_id).unwrap();
        let Node::Delta(d) = &*read else { panic!() };
        let DeltaView::Leaf(view) = &d.view else { panic!() };
        assert_eq!(view.value(7), Some([9; 32]));
        assert_eq!(view.value(1), Some([1; 32])); // from the base
        drop(read);
        assert_eq!(cold.counters().loads - before, 2);

        // With the base already cached, a delta load costs one record load.
        let cold2 = NodeManager::new(8, manager.store().clone(), Arc::new(manager.layout().clone()));
        drop(cold2.get_read(base_id).unwrap());
        let before = cold2.counters().loads;
        drop(cold2.get_read(delta_id).unwrap());
        assert_eq!(cold2.counters().loads - before, 1);
    }
}
