//! The archive trie: append-only, copy-on-write store answering queries at
//! any block height.
//!
//! Applying a block never mutates a reachable node. Every touched node
//! yields a new version under a fresh id: either a full copy, or — when
//! delta nodes are enabled for its kind and the cumulative update count
//! against the base stays within the threshold — a delta node holding the
//! merged change set against that base. A new delta always references the
//! base directly, never the previous delta, so reading any historical node
//! costs at most two record loads. Once the updates applied against a base
//! would exceed the threshold, a full base node is materialized instead and
//! subsequent deltas reference it.
//!
//! Batching gives each node on a modified path at most one copy-on-write
//! per block. The per-height root index is append-only; prior roots are
//! never touched.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::{Mutex, RwLock};

use crate::commitment::Scalar;
use crate::error::{Error, Result};
use crate::nodes::{
    child_to_payload, DeltaNode, DeltaView, InnerNode, InnerTrack, LeafNode, LeafTrack, Node,
    NodeId, NodeKind,
};
use crate::storage::{FileIo, PositionalFile};
use crate::trie::batch::{partition, BatchEntry, UpdateBatch};
use crate::trie::core::TrieCore;
use crate::trie::TreeKey;

/// Per-block instrumentation: existing path nodes visited and new node
/// versions written.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ArchiveBlockStats {
    pub path_nodes_touched: u64,
    pub versions_written: u64,
    pub fresh_nodes: u64,
}

/// Append-only map from block height to (root id, root commitment), backed
/// by fixed 40-byte records.
pub struct RootIndex {
    file: PositionalFile,
    entries: RwLock<Vec<(NodeId, [u8; 32])>>,
}

const ROOT_RECORD: usize = 40;

impl RootIndex {
    pub fn open(dir: &Path, blocks: u64) -> Result<RootIndex> {
        let file = PositionalFile::open(&dir.join("roots.idx"))?;
        let mut entries = Vec::with_capacity(blocks as usize);
        for height in 0..blocks {
            let mut buf = [0u8; ROOT_RECORD];
            file.read_at(height * ROOT_RECORD as u64, &mut buf)?;
            let root = NodeId::from_u64(u64::from_le_bytes(buf[..8].try_into().unwrap()));
            let commitment: [u8; 32] = buf[8..].try_into().unwrap();
            entries.push((root, commitment));
        }
        // Records past the checkpointed block count are a crash remnant and
        // are logically truncated.
        Ok(RootIndex {
            file,
            entries: RwLock::new(entries),
        })
    }

    pub fn append(&self, root: NodeId, commitment: [u8; 32]) -> Result<()> {
        let mut entries = self.entries.write();
        let mut buf = [0u8; ROOT_RECORD];
        buf[..8].copy_from_slice(&root.to_u64().to_le_bytes());
        buf[8..].copy_from_slice(&commitment);
        self.file
            .write_at(entries.len() as u64 * ROOT_RECORD as u64, &buf)?;
        entries.push((root, commitment));
        Ok(())
    }

    pub fn get(&self, height: u64) -> Option<(NodeId, [u8; 32])> {
        self.entries.read().get(height as usize).copied()
    }

    pub fn len(&self) -> u64 {
        self.entries.read().len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.read().is_empty()
    }

    pub fn sync(&self) -> Result<()> {
        self.file.sync()
    }
}

pub struct ArchiveTrie {
    core: TrieCore,
    index: RootIndex,
    delta_inner: bool,
    delta_leaf: bool,
    block_lock: Mutex<()>,
    poisoned: AtomicBool,
    last_stats: Mutex<ArchiveBlockStats>,
}

impl ArchiveTrie {
    pub fn new(core: TrieCore, index: RootIndex, delta_inner: bool, delta_leaf: bool) -> ArchiveTrie {
        ArchiveTrie {
            core,
            index,
            delta_inner,
            delta_leaf,
            block_lock: Mutex::new(()),
            poisoned: AtomicBool::new(false),
            last_stats: Mutex::new(ArchiveBlockStats::default()),
        }
    }

    pub fn core(&self) -> &TrieCore {
        &self.core
    }

    pub fn index(&self) -> &RootIndex {
        &self.index
    }

    /// Number of blocks applied; valid query heights are `0..blocks()`.
    pub fn blocks(&self) -> u64 {
        self.index.len()
    }

    pub fn latest_root(&self) -> NodeId {
        if self.index.is_empty() {
            NodeId::NULL
        } else {
            self.index.get(self.index.len() - 1).unwrap().0
        }
    }

    /// Instrumentation from the most recent block.
    pub fn last_block_stats(&self) -> ArchiveBlockStats {
        *self.last_stats.lock()
    }

    /// Value of a key as of the given block height.
    pub fn lookup_at(&self, key: &TreeKey, height: u64) -> Result<Option<[u8; 32]>> {
        let (root, _) = self.index.get(height).ok_or_else(|| {
            Error::invalid(format!(
                "height {height} not yet applied (have {})",
                self.index.len()
            ))
        })?;
        self.core.lookup(root, key)
    }

    /// Root commitment as of the given height.
    pub fn commitment_at(&self, height: u64) -> Result<[u8; 32]> {
        self.index
            .get(height)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::invalid(format!("height {height} not yet applied")))
    }

    /// Applies the block at the next height and returns the new root id and
    /// commitment. Prior roots stay untouched and queryable.
    pub fn apply_block(&self, batch: &UpdateBatch, height: u64) -> Result<(NodeId, [u8; 32])> {
        let _serial = self.block_lock.lock();
        if self.poisoned.load(Ordering::Acquire) {
            return Err(Error::ContractViolation(
                "archive is poisoned by an earlier failed block".into(),
            ));
        }
        let expected = self.index.len();
        if height != expected {
            return Err(Error::invalid(format!(
                "non-contiguous height {height}, expected {expected}"
            )));
        }

        let prev_root = self.latest_root();
        let mut updater = ArchiveUpdater {
            core: &self.core,
            batch: batch.entries(),
            dirty: Vec::new(),
            delta_inner: self.delta_inner,
            delta_leaf: self.delta_leaf,
            stats: ArchiveBlockStats::default(),
        };

        let result = (|| {
            let new_root = if batch.is_empty() {
                prev_root
            } else if prev_root.is_null() {
                updater
                    .build_fresh(None, 0..batch.len(), 0)?
                    .unwrap_or(NodeId::NULL)
            } else {
                match updater.apply_existing(prev_root, 0..batch.len(), 0)? {
                    Outcome::Unchanged => prev_root,
                    Outcome::Replaced(id) => id,
                    Outcome::Removed => NodeId::NULL,
                }
            };
            self.core.recompute_commitments(&updater.dirty)?;
            let commitment = self.core.root_commitment_bytes(new_root)?;
            self.index.append(new_root, commitment)?;
            Ok((new_root, commitment))
        })();

        match result {
            Ok(ok) => {
                *self.last_stats.lock() = updater.stats;
                Ok(ok)
            }
            Err(e) => {
                self.poisoned.store(true, Ordering::Release);
                Err(e)
            }
        }
    }
}

enum Outcome {
    /// The sub-batch did not change this subtree; the old version stands.
    Unchanged,
    /// A new version was written under this id.
    Replaced(NodeId),
    /// The subtree vanished (all values deleted).
    Removed,
}

struct ArchiveUpdater<'t> {
    core: &'t TrieCore,
    batch: &'t [BatchEntry],
    dirty: Vec<Vec<NodeId>>,
    delta_inner: bool,
    delta_leaf: bool,
    stats: ArchiveBlockStats,
}

/// How the previous version of a node was represented.
enum Repr {
    Base,
    Delta {
        base: NodeId,
        entries: Vec<(u8, [u8; 32])>,
        applied: u16,
    },
}

impl<'t> ArchiveUpdater<'t> {
    fn mark_dirty(&mut self, depth: usize, id: NodeId) {
        if self.dirty.len() <= depth {
            self.dirty.resize_with(depth + 1, Vec::new);
        }
        self.dirty[depth].push(id);
    }

    /// Copy-on-write application of a sub-batch to the node version `id`.
    /// Post-order: children first, then this node's new version, so each
    /// path node undergoes at most one copy-on-write per block.
    fn apply_existing(&mut self, id: NodeId, range: Range<usize>, depth: usize) -> Result<Outcome> {
        self.stats.path_nodes_touched += 1;
        let node = {
            let guard = self.core.manager.get_read(id)?;
            (*guard).clone()
        };
        match &node {
            Node::Inner(inner) => self.apply_inner(id, inner, Repr::Base, range, depth),
            Node::Leaf(leaf) => self.apply_leaf(id, leaf, Repr::Base, range, depth),
            Node::Delta(delta) => {
                let repr = Repr::Delta {
                    base: delta.base,
                    entries: delta.entries.clone(),
                    applied: delta.applied,
                };
                match &delta.view {
                    DeltaView::Inner(inner) => self.apply_inner(id, inner, repr, range, depth),
                    DeltaView::Leaf(leaf) => self.apply_leaf(id, leaf, repr, range, depth),
                }
            }
        }
    }

    fn apply_inner(
        &mut self,
        id: NodeId,
        view: &InnerNode,
        repr: Repr,
        range: Range<usize>,
        depth: usize,
    ) -> Result<Outcome> {
        let base_offset = range.start;
        let parts = partition(&self.batch[range], depth);

        // Children first.
        let mut changes: Vec<(u8, NodeId, NodeId)> = Vec::new(); // (slot, old, new)
        for (byte, r) in &parts {
            let abs = base_offset + r.start..base_offset + r.end;
            let old_child = view.child(*byte);
            if old_child.is_null() {
                if let Some(new_child) = self.build_fresh(None, abs, depth + 1)? {
                    changes.push((*byte, NodeId::NULL, new_child));
                }
            } else {
                match self.apply_existing(old_child, abs, depth + 1)? {
                    Outcome::Unchanged => {}
                    Outcome::Replaced(new_child) => changes.push((*byte, old_child, new_child)),
                    Outcome::Removed => changes.push((*byte, old_child, NodeId::NULL)),
                }
            }
        }
        if changes.is_empty() {
            return Ok(Outcome::Unchanged);
        }

        // New materialized view.
        let mut new_view = view.clone();
        new_view.track = None;
        let mut track = InnerTrack::default();
        for (slot, old_child, new_child) in &changes {
            let old_scalar = if old_child.is_null() {
                Scalar::ZERO
            } else {
                self.core.resolve_commitment(*old_child)?.to_scalar()
            };
            track.old_scalars.insert(*slot, old_scalar);
            new_view.set_child(*slot, *new_child);
        }
        if new_view.occupied() == 0 {
            return Ok(Outcome::Removed);
        }
        // Seed the incremental recomputation with the previous version's
        // commitment (reconstructing it for cold delta views).
        new_view.commitment = self.core.resolve_commitment(id)?;
        new_view.track = Some(Box::new(track));
        let occupancy = new_view.occupied();

        let update_payloads: Vec<(u8, [u8; 32])> = changes
            .iter()
            .map(|(slot, _, new_child)| (*slot, child_to_payload(*new_child)))
            .collect();
        let node = self.choose_representation(
            id,
            repr,
            NodeKind::Inner,
            self.delta_inner,
            update_payloads,
            false,
            move |view_box: InnerNode| Node::Inner(Box::new(view_box)),
            new_view,
        )?;

        let tag = match &node {
            Node::Inner(_) => self
                .core
                .manager
                .layout()
                .required_tag(NodeKind::Inner, occupancy)?,
            Node::Delta(d) => self
                .core
                .manager
                .layout()
                .delta_tag(NodeKind::Inner, d.entries.len())?,
            Node::Leaf(_) => unreachable!(),
        };
        let (new_id, guard) = self.core.manager.create(node, tag)?;
        drop(guard);
        self.stats.versions_written += 1;
        self.mark_dirty(depth, new_id);
        Ok(Outcome::Replaced(new_id))
    }

    fn apply_leaf(
        &mut self,
        id: NodeId,
        view: &LeafNode,
        repr: Repr,
        range: Range<usize>,
        depth: usize,
    ) -> Result<Outcome> {
        let stem = view.stem;
        let splits = self.batch[range.clone()]
            .iter()
            .any(|e| e.key.stem() != stem && e.value.is_some());
        if splits {
            // The leaf's position gains an inner chain. The old leaf version
            // is shared, not copied; a sub-batch targeting it spawns a new
            // version below.
            return match self.build_fresh(Some((id, stem)), range, depth)? {
                Some(new_id) => Ok(Outcome::Replaced(new_id)),
                None => Ok(Outcome::Removed),
            };
        }

        // Plan the changed slots: (suffix, old value, new value).
        type SlotChange = (u8, Option<[u8; 32]>, Option<[u8; 32]>);
        let mut changed: Vec<SlotChange> = Vec::new();
        for e in &self.batch[range] {
            if e.key.stem() != stem {
                continue;
            }
            let old = view.value(e.key.suffix());
            if old != e.value {
                changed.push((e.key.suffix(), old, e.value));
            }
        }
        if changed.is_empty() {
            return Ok(Outcome::Unchanged);
        }

        let mut new_view = view.clone();
        new_view.track = None;
        let mut track = LeafTrack::default();
        let mut has_deletion = false;
        for (suffix, old, new) in &changed {
            new_view.set_value(*suffix, *new);
            track.old_values.insert(*suffix, *old);
            has_deletion |= new.is_none();
        }
        if new_view.occupied() == 0 {
            return Ok(Outcome::Removed);
        }

        // Seed incremental recomputation: the previous version's extension
        // commitment and its suffix commitments over the pre-change values.
        new_view.c_ext = self.core.resolve_commitment(id)?;
        if new_view.suffix_commitments.is_none() {
            let (c1, c2) = self.core.engine.leaf_suffix_commitments(&view.optional_values())?;
            new_view.suffix_commitments = Some(Box::new((c1, c2)));
        }
        new_view.track = Some(Box::new(track));
        let occupancy = new_view.occupied();

        let update_payloads: Vec<(u8, [u8; 32])> = changed
            .iter()
            .filter_map(|(suffix, _, new)| new.map(|v| (*suffix, v)))
            .collect();
        let node = self.choose_representation(
            id,
            repr,
            NodeKind::Leaf,
            self.delta_leaf,
            update_payloads,
            has_deletion,
            move |view_box: LeafNode| Node::Leaf(Box::new(view_box)),
            new_view,
        )?;

        let tag = match &node {
            Node::Leaf(_) => self
                .core
                .manager
                .layout()
                .required_tag(NodeKind::Leaf, occupancy)?,
            Node::Delta(d) => self
                .core
                .manager
                .layout()
                .delta_tag(NodeKind::Leaf, d.entries.len())?,
            Node::Inner(_) => unreachable!(),
        };
        let (new_id, guard) = self.core.manager.create(node, tag)?;
        drop(guard);
        self.stats.versions_written += 1;
        self.mark_dirty(depth, new_id);
        Ok(Outcome::Replaced(new_id))
    }

    /// Picks the new version's representation: a delta against the previous
    /// base when enabled and within the threshold, a full base otherwise.
    /// The cumulative count of slot updates applied against one base drives
    /// promotion; the merged change set never chains through deltas.
    #[allow(clippy::too_many_arguments)]
    fn choose_representation<V>(
        &self,
        old_id: NodeId,
        repr: Repr,
        kind: NodeKind,
        deltas_enabled: bool,
        updates: Vec<(u8, [u8; 32])>,
        force_base: bool,
        make_base: impl FnOnce(V) -> Node,
        view: V,
    ) -> Result<Node>
    where
        DeltaView: From<V>,
    {
        if deltas_enabled && !force_base {
            let tau = self.core.manager.layout().tau() as u32;
            let (base, old_entries, old_applied) = match repr {
                Repr::Base => (old_id, Vec::new(), 0u16),
                Repr::Delta {
                    base,
                    entries,
                    applied,
                } => (base, entries, applied),
            };
            let applied = old_applied as u32 + updates.len() as u32;
            if applied <= tau {
                let mut merged: BTreeMap<u8, [u8; 32]> = old_entries.into_iter().collect();
                for (slot, payload) in &updates {
                    merged.insert(*slot, *payload);
                }
                if merged.len() as u32 <= tau {
                    return Ok(Node::Delta(Box::new(DeltaNode {
                        kind,
                        base,
                        applied: applied as u16,
                        entries: merged.into_iter().collect(),
                        view: DeltaView::from(view),
                        commitment_known: false,
                    })));
                }
            }
        }
        Ok(make_base(view))
    }

    /// Builds a fresh subtree (archive variant): new base nodes throughout,
    /// sharing a displaced leaf by reference where possible.
    fn build_fresh(
        &mut self,
        displaced: Option<(NodeId, [u8; 31])>,
        range: Range<usize>,
        depth: usize,
    ) -> Result<Option<NodeId>> {
        let displaced_stem = displaced.map(|(_, s)| s);
        let has_effective = self.batch[range.clone()]
            .iter()
            .any(|e| e.value.is_some() || Some(e.key.stem()) == displaced_stem);
        if !has_effective {
            return Ok(displaced.map(|(id, _)| id));
        }

        let mut insert_stems: Vec<[u8; 31]> = self.batch[range.clone()]
            .iter()
            .filter(|e| e.value.is_some())
            .map(|e| e.key.stem())
            .collect();
        insert_stems.dedup();

        match displaced {
            None if insert_stems.len() == 1 => {
                let mut leaf = LeafNode::new(insert_stems[0]);
                for e in &self.batch[range] {
                    if let Some(v) = e.value {
                        leaf.set_value(e.key.suffix(), Some(v));
                    }
                }
                debug_assert!(leaf.occupied() > 0);
                let tag = self
                    .core
                    .manager
                    .layout()
                    .required_tag(NodeKind::Leaf, leaf.occupied())?;
                let (id, guard) = self.core.manager.create(Node::Leaf(Box::new(leaf)), tag)?;
                drop(guard);
                self.stats.fresh_nodes += 1;
                self.mark_dirty(depth, id);
                Ok(Some(id))
            }
            Some((leaf_id, stem)) if insert_stems.iter().all(|s| *s == stem) => {
                match self.apply_existing(leaf_id, range, depth)? {
                    Outcome::Unchanged => Ok(Some(leaf_id)),
                    Outcome::Replaced(id) => Ok(Some(id)),
                    Outcome::Removed => Ok(None),
                }
            }
            _ => {
                let base_offset = range.start;
                let parts = partition(&self.batch[range], depth);
                let displaced_byte = displaced_stem.map(|s| s[depth]);

                let mut inner = InnerNode::default();
                let mut displaced_handled = false;
                for (byte, r) in &parts {
                    let abs = base_offset + r.start..base_offset + r.end;
                    let carries = Some(*byte) == displaced_byte;
                    let child = if carries {
                        displaced_handled = true;
                        self.build_fresh(displaced, abs, depth + 1)?
                    } else {
                        self.build_fresh(None, abs, depth + 1)?
                    };
                    if let Some(child) = child {
                        inner.set_child(*byte, child);
                    }
                }
                if let (Some(byte), false) = (displaced_byte, displaced_handled) {
                    inner.set_child(byte, displaced.unwrap().0);
                }
                if inner.occupied() == 0 {
                    return Ok(None);
                }
                let tag = self
                    .core
                    .manager
                    .layout()
                    .required_tag(NodeKind::Inner, inner.occupied())?;
                let (id, guard) = self.core.manager.create(Node::Inner(Box::new(inner)), tag)?;
                drop(guard);
                self.stats.fresh_nodes += 1;
                self.mark_dirty(depth, id);
                Ok(Some(id))
            }
        }
    }
}

