//! The live trie: current-state store with destructive in-place updates.
//!
//! A block is applied in three stages. Stage 1 (batch assembly) happens in
//! [`UpdateBatch::assemble`]. Stage 2 walks the trie breadth-first,
//! level-wise: the sorted batch is partitioned into contiguous sub-batches
//! along the way, nodes are re-specialized in place as their occupancy
//! grows (the target variant is pre-sized from the sub-batch), missing
//! subtrees are created, and diverging stems split leaves into inner
//! chains. Exclusive guards follow a hand-over-hand discipline: a level's
//! parents stay locked until all their children have recorded their new
//! identifiers, so guards never span more than three consecutive levels.
//! Deletions propagate one level up immediately; the resulting shrink and
//! empty-node work is finished by a bottom-up cleanup pass that re-acquires
//! at most two levels at a time. Stage 3 recomputes commitments over the
//! dirty set, deepest level first.
//!
//! Superseded specialization slots are freed only after the new root is
//! published, so a failed block never invalidates the previous root.

use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::{Mutex, RwLock};

use crate::commitment::Scalar;
use crate::error::{Error, Result};
use crate::node_manager::WriteGuard;
use crate::nodes::{InnerNode, InnerTrack, LeafNode, LeafTrack, Node, NodeId, NodeKind};
use crate::trie::batch::{partition, BatchEntry, UpdateBatch};
use crate::trie::core::TrieCore;
use crate::trie::TreeKey;

pub struct LiveTrie {
    core: TrieCore,
    root: RwLock<NodeId>,
    block_lock: Mutex<()>,
    pending_frees: Mutex<Vec<NodeId>>,
    poisoned: AtomicBool,
}

impl LiveTrie {
    pub fn new(core: TrieCore, root: NodeId) -> LiveTrie {
        LiveTrie {
            core,
            root: RwLock::new(root),
            block_lock: Mutex::new(()),
            pending_frees: Mutex::new(Vec::new()),
            poisoned: AtomicBool::new(false),
        }
    }

    pub fn core(&self) -> &TrieCore {
        &self.core
    }

    pub fn root(&self) -> NodeId {
        *self.root.read()
    }

    pub fn lookup(&self, key: &TreeKey) -> Result<Option<[u8; 32]>> {
        self.core.lookup(self.root(), key)
    }

    pub fn root_commitment(&self) -> Result<[u8; 32]> {
        self.core.root_commitment_bytes(self.root())
    }

    /// Applies one block of mutations and returns the new root commitment.
    /// A failure before publication leaves the previous root reachable and
    /// poisons the trie (in-memory state may be partial; reopen from the
    /// last checkpoint to continue).
    pub fn apply_block(&self, batch: &UpdateBatch) -> Result<[u8; 32]> {
        let _serial = self.block_lock.lock();
        if self.poisoned.load(Ordering::Acquire) {
            return Err(Error::ContractViolation(
                "trie is poisoned by an earlier failed block".into(),
            ));
        }
        if batch.is_empty() {
            return self.root_commitment();
        }

        let root = self.root();
        let mut updater = Updater::new(&self.core, batch.entries());
        let result = updater.run(root).and_then(|new_root| {
            self.core.recompute_commitments(&updater.dirty)?;
            self.core
                .root_commitment_bytes(new_root)
                .map(|c| (new_root, c))
        });

        match result {
            Ok((new_root, commitment)) => {
                *self.root.write() = new_root;
                let mut pending = self.pending_frees.lock();
                pending.append(&mut updater.staged_frees);
                let retry: Vec<NodeId> = pending.drain(..).collect();
                for id in retry {
                    match self.core.manager.delete(id) {
                        Ok(()) => {}
                        // Still pinned by a concurrent reader; retried after
                        // the next block.
                        Err(Error::ContractViolation(_)) => pending.push(id),
                        Err(e) => return Err(e),
                    }
                }
                Ok(commitment)
            }
            Err(e) => {
                self.poisoned.store(true, Ordering::Release);
                Err(e)
            }
        }
    }
}

/// Where a task reports its outcome: a slot of a locked parent at the
/// previous level, or the trie root.
#[derive(Clone, Copy, Debug)]
enum ParentRef {
    Root,
    Slot {
        /// Index of the parent's guard in the previous level.
        index: usize,
        /// The parent's (final) id; recorded for the cleanup pass.
        id: NodeId,
        slot: u8,
    },
}

#[derive(Debug)]
enum TaskKind {
    /// An existing node occupies this position.
    Update(NodeId),
    /// Nothing exists here; build a subtree for the sub-batch, re-homing a
    /// displaced leaf if a split sent one down.
    Fresh { displaced: Option<(NodeId, [u8; 31])> },
}

#[derive(Debug)]
struct Task {
    kind: TaskKind,
    parent: ParentRef,
    range: Range<usize>,
}

type Guards<'t> = Vec<Option<WriteGuard<'t>>>;

struct Updater<'t> {
    core: &'t TrieCore,
    batch: &'t [BatchEntry],
    dirty: Vec<Vec<NodeId>>,
    /// Nodes to re-check bottom-up after the descent: occupancy shrank or a
    /// pre-sized subtree never materialized.
    candidates: Vec<(usize, NodeId)>,
    candidate_set: HashSet<NodeId>,
    /// Child id -> (parent id, slot) for every node the descent touched.
    parent_link: HashMap<NodeId, (NodeId, u8)>,
    staged_frees: Vec<NodeId>,
    new_root: NodeId,
}

impl<'t> Updater<'t> {
    fn new(core: &'t TrieCore, batch: &'t [BatchEntry]) -> Updater<'t> {
        Updater {
            core,
            batch,
            dirty: Vec::new(),
            candidates: Vec::new(),
            candidate_set: HashSet::new(),
            parent_link: HashMap::new(),
            staged_frees: Vec::new(),
            new_root: NodeId::NULL,
        }
    }

    fn run(&mut self, root: NodeId) -> Result<NodeId> {
        self.new_root = root;
        let root_task = Task {
            kind: if root.is_null() {
                TaskKind::Fresh { displaced: None }
            } else {
                TaskKind::Update(root)
            },
            parent: ParentRef::Root,
            range: 0..self.batch.len(),
        };

        let mut tasks = vec![root_task];
        let mut prev_guards: Guards<'t> = Vec::new();
        let mut depth = 0usize;
        while !tasks.is_empty() {
            let mut cur_guards: Guards<'t> = Vec::new();
            let mut next_tasks: Vec<Task> = Vec::new();
            for task in tasks {
                self.process_task(task, depth, &mut prev_guards, &mut cur_guards, &mut next_tasks)?;
            }
            // All nodes at this depth are processed and their identifiers
            // recorded in the still-locked parents; release the parents.
            if depth > 0 {
                self.release_level(depth - 1, &mut prev_guards);
            }
            prev_guards = cur_guards;
            tasks = next_tasks;
            depth += 1;
        }
        if depth > 0 {
            self.release_level(depth - 1, &mut prev_guards);
        }
        self.cleanup()?;
        Ok(self.new_root)
    }

    fn release_level(&self, depth: usize, guards: &mut Guards<'t>) {
        let held = guards.iter().filter(|g| g.is_some()).count();
        guards.clear();
        if held > 0 {
            self.core.tracker.release(depth, held);
        }
    }

    fn mark_dirty(&mut self, depth: usize, id: NodeId) {
        if self.dirty.len() <= depth {
            self.dirty.resize_with(depth + 1, Vec::new);
        }
        self.dirty[depth].push(id);
    }

    fn mark_candidate(&mut self, depth: usize, id: NodeId) {
        if self.candidate_set.insert(id) {
            self.candidates.push((depth, id));
        }
    }

    /// Records a task outcome in its parent: the (possibly new) child id
    /// and, when the slot's committed scalar changes, the pre-block scalar.
    /// Also records the child's parent linkage for the cleanup pass.
    fn report(
        &mut self,
        prev: &mut Guards<'t>,
        parent: ParentRef,
        new_id: Option<NodeId>,
        old_scalar: Option<Scalar>,
    ) {
        match parent {
            ParentRef::Root => {
                self.new_root = new_id.unwrap_or(NodeId::NULL);
            }
            ParentRef::Slot { index, id, slot } => {
                let guard = prev[index].as_mut().expect("parent guard is held");
                let Node::Inner(inner) = &mut **guard else {
                    unreachable!("parents are inner nodes")
                };
                if let Some(scalar) = old_scalar {
                    if let Some(track) = inner.track.as_mut() {
                        track.old_scalars.entry(slot).or_insert(scalar);
                    }
                }
                match new_id {
                    Some(child) => {
                        if inner.child(slot) != child {
                            inner.set_child(slot, child);
                        }
                        self.parent_link.insert(child, (id, slot));
                    }
                    None => {
                        inner.set_child(slot, NodeId::NULL);
                    }
                }
            }
        }
    }

    fn process_task(
        &mut self,
        task: Task,
        depth: usize,
        prev: &mut Guards<'t>,
        cur: &mut Guards<'t>,
        next: &mut Vec<Task>,
    ) -> Result<()> {
        match task.kind {
            TaskKind::Update(id) => {
                let guard = self.core.manager.get_write(id)?;
                self.core.tracker.acquire(depth);
                match &*guard {
                    Node::Inner(_) => {
                        self.process_inner(id, guard, task.parent, task.range, depth, prev, cur, next)
                    }
                    Node::Leaf(_) => {
                        self.process_leaf(id, guard, task.parent, task.range, depth, prev, cur, next)
                    }
                    Node::Delta(_) => Err(Error::Corruption(
                        "delta node reachable from the live trie".into(),
                    )),
                }
            }
            TaskKind::Fresh { displaced } => {
                self.process_fresh(displaced, task.parent, task.range, depth, prev, cur, next)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn process_inner(
        &mut self,
        id: NodeId,
        guard: WriteGuard<'t>,
        parent: ParentRef,
        range: Range<usize>,
        depth: usize,
        prev: &mut Guards<'t>,
        cur: &mut Guards<'t>,
        next: &mut Vec<Task>,
    ) -> Result<()> {
        let parts = partition(&self.batch[range.clone()], depth);
        let base = range.start;

        // Pre-size: count slots that will gain a subtree, so the target
        // variant is allocated directly instead of promoted stepwise.
        let (old_scalar, occupied, additions) = {
            let Node::Inner(inner) = &*guard else { unreachable!() };
            let mut additions = 0u16;
            for (byte, r) in &parts {
                if inner.child(*byte).is_null()
                    && self.batch[base + r.start..base + r.end]
                        .iter()
                        .any(|e| e.value.is_some())
                {
                    additions += 1;
                }
            }
            (inner.commitment.to_scalar(), inner.occupied(), additions)
        };

        let layout = self.core.manager.layout();
        let capacity = layout.info(id.tag())?.shape.capacity();
        let target = occupied + additions;
        let (effective_id, mut guard) = if target > capacity {
            // Grow in one step: clone into the pre-sized variant. The old
            // node stays untouched for in-flight readers; its slot is freed
            // after publication.
            let clone = {
                let Node::Inner(inner) = &*guard else { unreachable!() };
                let mut clone = inner.clone();
                clone.track = Some(Box::new(InnerTrack::default()));
                clone
            };
            let tag = layout.required_tag(NodeKind::Inner, target)?;
            drop(guard);
            self.core.tracker.release(depth, 1);
            let (new_id, new_guard) =
                self.core.manager.create(Node::Inner(clone), tag)?;
            self.core.tracker.acquire(depth);
            self.staged_frees.push(id);
            (new_id, new_guard)
        } else {
            (id, guard)
        };

        {
            let Node::Inner(inner) = guard.node_mut_untracked() else {
                unreachable!()
            };
            if inner.track.is_none() {
                inner.track = Some(Box::new(InnerTrack::default()));
            }
        }

        self.report(prev, parent, Some(effective_id), Some(old_scalar));
        self.mark_dirty(depth, effective_id);
        // Deletions may shrink this node below its capacity class.
        self.mark_candidate(depth, effective_id);

        let my_index = cur.len();
        {
            let Node::Inner(inner) = &*guard else { unreachable!() };
            for (byte, r) in &parts {
                let child = inner.child(*byte);
                let abs = base + r.start..base + r.end;
                if child.is_null() {
                    // Skip slots that receive only deletes of absent keys.
                    if self.batch[abs.clone()].iter().any(|e| e.value.is_some()) {
                        next.push(Task {
                            kind: TaskKind::Fresh { displaced: None },
                            parent: ParentRef::Slot {
                                index: my_index,
                                id: effective_id,
                                slot: *byte,
                            },
                            range: abs,
                        });
                    }
                } else {
                    next.push(Task {
                        kind: TaskKind::Update(child),
                        parent: ParentRef::Slot {
                            index: my_index,
                            id: effective_id,
                            slot: *byte,
                        },
                        range: abs,
                    });
                }
            }
        }
        cur.push(Some(guard));
        Ok(())
    }

    /// A leaf-targeted sub-batch: plain value writes when every insert
    /// matches the stem, otherwise a split into an inner chain down to the
    /// divergence level.
    #[allow(clippy::too_many_arguments)]
    fn process_leaf(
        &mut self,
        id: NodeId,
        guard: WriteGuard<'t>,
        parent: ParentRef,
        range: Range<usize>,
        depth: usize,
        prev: &mut Guards<'t>,
        cur: &mut Guards<'t>,
        next: &mut Vec<Task>,
    ) -> Result<()> {
        let (stem, old_scalar) = {
            let Node::Leaf(leaf) = &*guard else { unreachable!() };
            (leaf.stem, leaf.c_ext.to_scalar())
        };
        // Foreign deletes are no-ops; only foreign inserts force a split.
        let splits = self.batch[range.clone()]
            .iter()
            .any(|e| e.key.stem() != stem && e.value.is_some());

        if !splits {
            let outcome = self.apply_leaf_writes(id, guard, range, depth, cur)?;
            self.finish_leaf(outcome, parent, depth, prev);
            return Ok(());
        }

        // Split: an inner node takes the leaf's position; the leaf moves
        // down, alongside fresh subtrees for the diverging stems.
        drop(guard);
        self.core.tracker.release(depth, 1);
        self.build_inner_over(
            Some((id, stem)),
            parent,
            range,
            depth,
            Some(old_scalar),
            prev,
            cur,
            next,
        )
    }

    /// Builds a subtree at an empty position (a fresh slot, or the position
    /// a split handed down together with its displaced leaf).
    #[allow(clippy::too_many_arguments)]
    fn process_fresh(
        &mut self,
        displaced: Option<(NodeId, [u8; 31])>,
        parent: ParentRef,
        range: Range<usize>,
        depth: usize,
        prev: &mut Guards<'t>,
        cur: &mut Guards<'t>,
        next: &mut Vec<Task>,
    ) -> Result<()> {
        // Effective entries: inserts anywhere, deletes only of the displaced
        // leaf's slots.
        let displaced_stem = displaced.map(|(_, s)| s);
        let has_effective = self.batch[range.clone()]
            .iter()
            .any(|e| e.value.is_some() || Some(e.key.stem()) == displaced_stem);

        if !has_effective {
            match displaced {
                Some((leaf_id, _)) => {
                    // Nothing targets the displaced leaf; it is already
                    // provisionally wired, so just record the linkage.
                    self.report(prev, parent, Some(leaf_id), None);
                }
                None => {
                    // The parent pre-sized for a subtree that never
                    // materialized; let cleanup re-check its tag.
                    if let ParentRef::Slot { id, .. } = parent {
                        self.mark_candidate(depth.saturating_sub(1), id);
                    }
                }
            }
            return Ok(());
        }

        let mut insert_stems: Vec<[u8; 31]> = self.batch[range.clone()]
            .iter()
            .filter(|e| e.value.is_some())
            .map(|e| e.key.stem())
            .collect();
        insert_stems.dedup();

        match displaced {
            None if insert_stems.len() == 1 => {
                // A single fresh leaf.
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
                self.core.tracker.acquire(depth);
                cur.push(Some(guard));
                self.report(prev, parent, Some(id), Some(Scalar::ZERO));
                self.mark_dirty(depth, id);
                Ok(())
            }
            Some((leaf_id, stem)) if insert_stems.iter().all(|s| *s == stem) => {
                // Everything targets the displaced leaf: update it here.
                // Its guard from the split level is released by now.
                let guard = self.core.manager.get_write(leaf_id)?;
                self.core.tracker.acquire(depth);
                let outcome = self.apply_leaf_writes(leaf_id, guard, range, depth, cur)?;
                match outcome {
                    LeafOutcome::Unchanged => {
                        self.report(prev, parent, Some(leaf_id), None);
                    }
                    other => self.finish_leaf(other, parent, depth, prev),
                }
                Ok(())
            }
            _ => self.build_inner_over(
                displaced,
                parent,
                range,
                depth,
                Some(Scalar::ZERO),
                prev,
                cur,
                next,
            ),
        }
    }

    /// Creates an inner node at `depth` covering a displaced leaf and/or the
    /// sub-batch, wiring direct children and spawning subtasks for deeper
    /// levels.
    #[allow(clippy::too_many_arguments)]
    fn build_inner_over(
        &mut self,
        displaced: Option<(NodeId, [u8; 31])>,
        parent: ParentRef,
        range: Range<usize>,
        depth: usize,
        old_scalar: Option<Scalar>,
        prev: &mut Guards<'t>,
        cur: &mut Guards<'t>,
        next: &mut Vec<Task>,
    ) -> Result<()> {
        let base = range.start;
        let parts = partition(&self.batch[range.clone()], depth);
        let displaced_byte = displaced.map(|(_, s)| s[depth]);

        // The child slots the new inner will hold.
        let mut slot_count = 0u16;
        let mut displaced_covered = false;
        for (byte, r) in &parts {
            let has_insert = self.batch[base + r.start..base + r.end]
                .iter()
                .any(|e| e.value.is_some());
            let carries = Some(*byte) == displaced_byte;
            if has_insert || carries {
                slot_count += 1;
            }
            displaced_covered |= carries;
        }
        if displaced_byte.is_some() && !displaced_covered {
            slot_count += 1;
        }
        debug_assert!(slot_count > 0);

        let mut inner = InnerNode::default();
        // Provisional wiring keeps the displaced leaf reachable while its
        // subtask is pending; the subtask's report overwrites the slot.
        if let Some((leaf_id, stem)) = displaced {
            inner.set_child(stem[depth], leaf_id);
        }
        let tag = self
            .core
            .manager
            .layout()
            .required_tag(NodeKind::Inner, slot_count)?;
        let (inner_id, inner_guard) =
            self.core.manager.create(Node::Inner(Box::new(inner)), tag)?;
        self.core.tracker.acquire(depth);
        self.report(prev, parent, Some(inner_id), old_scalar);
        self.mark_dirty(depth, inner_id);
        if let Some((leaf_id, stem)) = displaced {
            self.parent_link.insert(leaf_id, (inner_id, stem[depth]));
        }

        let my_index = cur.len();
        for (byte, r) in &parts {
            let abs = base + r.start..base + r.end;
            let has_insert = self.batch[abs.clone()].iter().any(|e| e.value.is_some());
            let carries = Some(*byte) == displaced_byte;
            if !has_insert && !carries {
                continue;
            }
            next.push(Task {
                kind: TaskKind::Fresh {
                    displaced: if carries { displaced } else { None },
                },
                parent: ParentRef::Slot {
                    index: my_index,
                    id: inner_id,
                    slot: *byte,
                },
                range: abs,
            });
        }
        cur.push(Some(inner_guard));
        Ok(())
    }

    /// Writes a stem-matching sub-batch into a leaf, growing the variant
    /// first when the post-update occupancy exceeds its capacity.
    fn apply_leaf_writes(
        &mut self,
        id: NodeId,
        guard: WriteGuard<'t>,
        range: Range<usize>,
        depth: usize,
        cur: &mut Guards<'t>,
    ) -> Result<LeafOutcome> {
        let (stem, occupied, old_scalar) = {
            let Node::Leaf(leaf) = &*guard else { unreachable!() };
            (leaf.stem, leaf.occupied(), leaf.c_ext.to_scalar())
        };

        // Plan the post-update occupancy before touching anything.
        let mut delta = 0i32;
        let mut changes = false;
        {
            let Node::Leaf(leaf) = &*guard else { unreachable!() };
            for e in &self.batch[range.clone()] {
                if e.key.stem() != stem {
                    continue;
                }
                let present = leaf.is_present(e.key.suffix());
                match (present, e.value.is_some()) {
                    (false, true) => {
                        delta += 1;
                        changes = true;
                    }
                    (true, false) => {
                        delta -= 1;
                        changes = true;
                    }
                    (true, true) => {
                        if leaf.value(e.key.suffix()) != e.value {
                            changes = true;
                        }
                    }
                    (false, false) => {}
                }
            }
        }
        if !changes {
            cur.push(Some(guard));
            return Ok(LeafOutcome::Unchanged);
        }

        let target = (occupied as i32 + delta) as u16;
        let layout = self.core.manager.layout();
        let capacity = layout.info(id.tag())?.shape.capacity();

        let (effective_id, mut guard) = if target > capacity {
            let clone = {
                let Node::Leaf(leaf) = &*guard else { unreachable!() };
                leaf.clone()
            };
            let tag = layout.required_tag(NodeKind::Leaf, target)?;
            drop(guard);
            self.core.tracker.release(depth, 1);
            let (new_id, new_guard) =
                self.core.manager.create(Node::Leaf(clone), tag)?;
            self.core.tracker.acquire(depth);
            self.staged_frees.push(id);
            (new_id, new_guard)
        } else {
            (id, guard)
        };

        {
            let Node::Leaf(leaf) = &mut *guard else { unreachable!() };
            // Materialize the suffix commitments against the pre-change
            // values, then record pre-change values per touched slot.
            self.core.prepare_leaf(leaf)?;
            if leaf.track.is_none() {
                leaf.track = Some(Box::new(LeafTrack::default()));
            }
            for e in &self.batch[range] {
                if e.key.stem() != stem {
                    continue;
                }
                let suffix = e.key.suffix();
                let old = leaf.set_value(suffix, e.value);
                if old != e.value {
                    leaf.track
                        .as_mut()
                        .unwrap()
                        .old_values
                        .entry(suffix)
                        .or_insert(old);
                }
            }
        }

        let emptied = {
            let Node::Leaf(leaf) = &*guard else { unreachable!() };
            leaf.occupied() == 0
        };
        cur.push(Some(guard));

        if emptied {
            self.staged_frees.push(effective_id);
            Ok(LeafOutcome::Removed { old_scalar })
        } else {
            Ok(LeafOutcome::Changed {
                id: effective_id,
                old_scalar,
            })
        }
    }

    fn finish_leaf(
        &mut self,
        outcome: LeafOutcome,
        parent: ParentRef,
        depth: usize,
        prev: &mut Guards<'t>,
    ) {
        match outcome {
            LeafOutcome::Unchanged => {}
            LeafOutcome::Removed { old_scalar } => {
                self.report(prev, parent, None, Some(old_scalar));
                if let ParentRef::Slot { id, .. } = parent {
                    // The parent lost a child; cleanup re-checks it.
                    self.mark_candidate(depth.saturating_sub(1), id);
                }
            }
            LeafOutcome::Changed { id, old_scalar } => {
                self.report(prev, parent, Some(id), Some(old_scalar));
                self.mark_dirty(depth, id);
                // A leaf that shrank may fit a smaller variant.
                self.mark_candidate(depth, id);
            }
        }
    }

    /// Bottom-up pass finishing deletions and shrink re-specializations
    /// recorded during the descent. Locks at most a parent/child pair at a
    /// time.
    fn cleanup(&mut self) -> Result<()> {
        let mut queue = std::mem::take(&mut self.candidates);
        queue.sort_by_key(|(depth, _)| std::cmp::Reverse(*depth));
        let mut i = 0;
        while i < queue.len() {
            let (depth, id) = queue[i];
            i += 1;
            self.cleanup_one(depth, id, &mut queue)?;
        }
        Ok(())
    }

    fn cleanup_one(
        &mut self,
        depth: usize,
        id: NodeId,
        queue: &mut Vec<(usize, NodeId)>,
    ) -> Result<()> {
        let is_root = self.new_root == id;
        let link = self.parent_link.get(&id).copied();
        if link.is_none() && !is_root {
            // Deleted or re-specialized by an earlier cleanup step.
            return Ok(());
        }

        // Parent first, then child, mirroring reader order.
        let mut parent_guard = match link {
            Some((pid, _)) if !is_root => {
                let g = self.core.manager.get_write(pid)?;
                self.core.tracker.acquire(depth - 1);
                Some(g)
            }
            _ => None,
        };
        let has_parent = parent_guard.is_some();
        let guard = self.core.manager.get_write(id)?;
        self.core.tracker.acquire(depth);

        let (kind, occupancy, commitment_scalar) = match &*guard {
            Node::Inner(n) => (NodeKind::Inner, n.occupied(), n.commitment.to_scalar()),
            Node::Leaf(n) => (NodeKind::Leaf, n.occupied(), n.c_ext.to_scalar()),
            Node::Delta(_) => unreachable!("live trie has no delta nodes"),
        };

        if occupancy == 0 {
            // Empty node: unlink, stage the delete, cascade to the parent.
            drop(guard);
            self.core.tracker.release(depth, 1);
            match (&mut parent_guard, link) {
                (Some(pg), Some((pid, slot))) => {
                    let Node::Inner(parent) = &mut **pg else { unreachable!() };
                    parent.set_child(slot, NodeId::NULL);
                    if let Some(track) = parent.track.as_mut() {
                        track.old_scalars.entry(slot).or_insert(commitment_scalar);
                    }
                    if self.candidate_set.insert(pid) {
                        queue.push((depth - 1, pid));
                    }
                }
                _ => {
                    self.new_root = NodeId::NULL;
                }
            }
            self.remove_dirty(depth, id);
            self.parent_link.remove(&id);
            self.staged_frees.push(id);
            drop(parent_guard);
            if has_parent {
                self.core.tracker.release(depth - 1, 1);
            }
            return Ok(());
        }

        let layout = self.core.manager.layout();
        let required = layout.required_tag(kind, occupancy)?;
        if required != id.tag() {
            // Move into the right variant under a fresh id. Content and
            // commitment are unchanged, so the parent's committed scalar
            // stays put; only the stored child id moves.
            let clone = match &*guard {
                Node::Inner(n) => Node::Inner(n.clone()),
                Node::Leaf(n) => Node::Leaf(n.clone()),
                Node::Delta(_) => unreachable!(),
            };
            drop(guard);
            self.core.tracker.release(depth, 1);
            let (new_id, new_guard) = self.core.manager.create(clone, required)?;
            drop(new_guard);
            match (&mut parent_guard, link) {
                (Some(pg), Some((pid, slot))) => {
                    let Node::Inner(parent) = &mut **pg else { unreachable!() };
                    parent.set_child(slot, new_id);
                    self.parent_link.insert(new_id, (pid, slot));
                }
                _ => {
                    self.new_root = new_id;
                }
            }
            self.replace_dirty(depth, id, new_id);
            self.parent_link.remove(&id);
            self.staged_frees.push(id);
        } else {
            drop(guard);
            self.core.tracker.release(depth, 1);
        }
        drop(parent_guard);
        if has_parent {
            self.core.tracker.release(depth - 1, 1);
        }
        Ok(())
    }

    fn remove_dirty(&mut self, depth: usize, id: NodeId) {
        if let Some(level) = self.dirty.get_mut(depth) {
            level.retain(|d| *d != id);
        }
    }

    fn replace_dirty(&mut self, depth: usize, old: NodeId, new: NodeId) {
        if let Some(level) = self.dirty.get_mut(depth) {
            for d in level.iter_mut() {
                if *d == old {
                    *d = new;
                }
            }
        }
    }
}

enum LeafOutcome {
    Unchanged,
    Removed { old_scalar: Scalar },
    Changed { id: NodeId, old_scalar: Scalar },
}
