//! Machinery shared by the live and archive tries: lookup, commitment
//! resolution, and the commitment-recomputation stage of the block
//! pipeline.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::commitment::{encode_value, CommitmentEngine, GroupElement, Scalar};
use crate::error::{Error, Result};
use crate::node_manager::NodeManager;
use crate::nodes::{DeltaView, InnerNode, LeafNode, Node, NodeId};
use crate::trie::TreeKey;

/// Tracks how many exclusive guards the update pipeline holds per trie
/// level, and the widest level span ever held at once. The update stages
/// report acquisitions and releases; tests assert the span bound.
#[derive(Default)]
pub struct GuardSpanTracker {
    counts: Mutex<Vec<usize>>,
    max_span: AtomicUsize,
}

impl GuardSpanTracker {
    pub fn acquire(&self, level: usize) {
        let mut counts = self.counts.lock();
        if counts.len() <= level {
            counts.resize(level + 1, 0);
        }
        counts[level] += 1;
        let held: Vec<usize> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(l, _)| l)
            .collect();
        if let (Some(&lo), Some(&hi)) = (held.first(), held.last()) {
            self.max_span.fetch_max(hi - lo + 1, Ordering::Relaxed);
        }
    }

    pub fn release(&self, level: usize, count: usize) {
        let mut counts = self.counts.lock();
        counts[level] -= count;
    }

    /// Widest span of levels that simultaneously held exclusive guards.
    pub fn max_span(&self) -> usize {
        self.max_span.load(Ordering::Relaxed)
    }
}

/// Node manager plus commitment engine: everything both trie variants need.
pub struct TrieCore {
    pub manager: NodeManager,
    pub engine: Arc<CommitmentEngine>,
    /// Dirty-set size at which commitment recomputation switches from the
    /// sequential fallback to the parallel pool.
    pub parallel_threshold: usize,
    pub tracker: GuardSpanTracker,
}

impl TrieCore {
    pub fn new(
        manager: NodeManager,
        engine: Arc<CommitmentEngine>,
        parallel_threshold: usize,
    ) -> TrieCore {
        TrieCore {
            manager,
            engine,
            parallel_threshold,
            tracker: GuardSpanTracker::default(),
        }
    }

    /// Point lookup under the given root. Descends one key byte per inner
    /// level; a stem mismatch at a leaf means the key is absent.
    pub fn lookup(&self, root: NodeId, key: &TreeKey) -> Result<Option<[u8; 32]>> {
        let mut current = root;
        let mut depth = 0usize;
        loop {
            if current.is_null() {
                return Ok(None);
            }
            if depth > 31 {
                return Err(Error::Corruption("trie deeper than the key space".into()));
            }
            let guard = self.manager.get_read(current).map_err(dangling(current))?;
            let (is_leaf, next) = match &*guard {
                Node::Inner(inner) => (None, inner.child(key.as_bytes()[depth])),
                Node::Leaf(leaf) => (Some(leaf_value(leaf, key)), NodeId::NULL),
                Node::Delta(delta) => match &delta.view {
                    DeltaView::Inner(inner) => (None, inner.child(key.as_bytes()[depth])),
                    DeltaView::Leaf(leaf) => (Some(leaf_value(leaf, key)), NodeId::NULL),
                },
            };
            match is_leaf {
                Some(value) => return Ok(value),
                None => {
                    current = next;
                    depth += 1;
                }
            }
        }
    }

    /// The commitment of a node whose commitment is already materialized.
    /// Stage-3 children always satisfy this; a historical delta whose
    /// commitment was never reconstructed does not.
    pub fn known_commitment(node: &Node) -> Result<GroupElement> {
        match node {
            Node::Inner(n) => Ok(n.commitment),
            Node::Leaf(n) => Ok(n.c_ext),
            Node::Delta(d) if d.commitment_known => Ok(match &d.view {
                DeltaView::Inner(n) => n.commitment,
                DeltaView::Leaf(n) => n.c_ext,
            }),
            Node::Delta(_) => Err(Error::Corruption(
                "commitment of a delta view required before reconstruction".into(),
            )),
        }
    }

    /// The commitment of an arbitrary (possibly historical) node version,
    /// reconstructing delta-view commitments on demand. Reconstruction is
    /// an update-path operation: it may load further nodes, which is why
    /// historical reads never come through here.
    pub fn resolve_commitment(&self, id: NodeId) -> Result<GroupElement> {
        {
            let guard = self.manager.get_read(id)?;
            if let Ok(c) = Self::known_commitment(&guard) {
                return Ok(c);
            }
        }
        // Reconstruct: leaf views self-contain their inputs; inner views
        // need the commitments of the base's children at the changed slots
        // and of the changed children themselves.
        let (kind_inputs, base_id, entries) = {
            let guard = self.manager.get_read(id)?;
            let Node::Delta(d) = &*guard else {
                unreachable!("only delta views lack commitments")
            };
            match &d.view {
                DeltaView::Leaf(leaf) => {
                    let (c1, c2) = self.engine.leaf_suffix_commitments(&leaf.optional_values())?;
                    let c_ext = self.engine.leaf_commitment(&leaf.stem, &c1, &c2)?;
                    (Some((c_ext, c1, c2)), d.base, Vec::new())
                }
                DeltaView::Inner(_) => (None, d.base, d.entries.clone()),
            }
        };

        let commitment = match kind_inputs {
            Some((c_ext, c1, c2)) => {
                let mut guard = self.manager.get_write(id)?;
                let node = guard.node_mut_untracked();
                let Node::Delta(d) = node else { unreachable!() };
                if let DeltaView::Leaf(leaf) = &mut d.view {
                    leaf.c_ext = c_ext;
                    leaf.suffix_commitments = Some(Box::new((c1, c2)));
                }
                d.commitment_known = true;
                c_ext
            }
            None => {
                // C = C_base + sum (s(new child) - s(base child)) * G_slot.
                let base_commitment;
                let mut old_children = Vec::with_capacity(entries.len());
                {
                    let base = self.manager.get_read(base_id)?;
                    let Node::Inner(base_inner) = &*base else {
                        return Err(Error::Corruption("inner delta over non-inner base".into()));
                    };
                    base_commitment = base_inner.commitment;
                    for (slot, _) in &entries {
                        old_children.push(base_inner.child(*slot));
                    }
                }
                let mut c = base_commitment;
                for ((slot, payload), old_child) in entries.iter().zip(old_children) {
                    let old_scalar = if old_child.is_null() {
                        Scalar::ZERO
                    } else {
                        self.resolve_commitment(old_child)?.to_scalar()
                    };
                    let new_child = crate::nodes::payload_to_child(payload);
                    let new_scalar = if new_child.is_null() {
                        Scalar::ZERO
                    } else {
                        self.resolve_commitment(new_child)?.to_scalar()
                    };
                    c = self.engine.update(&c, *slot as usize, &old_scalar, &new_scalar)?;
                }
                let mut guard = self.manager.get_write(id)?;
                let node = guard.node_mut_untracked();
                let Node::Delta(d) = node else { unreachable!() };
                if let DeltaView::Inner(inner) = &mut d.view {
                    inner.commitment = c;
                }
                d.commitment_known = true;
                c
            }
        };
        Ok(commitment)
    }

    /// Makes sure a leaf's suffix commitments are materialized; must run
    /// before the leaf's values change so the cache reflects the pre-change
    /// state. The extension commitment itself is untouched.
    pub fn prepare_leaf(&self, leaf: &mut LeafNode) -> Result<()> {
        if leaf.suffix_commitments.is_none() {
            let (c1, c2) = self.engine.leaf_suffix_commitments(&leaf.optional_values())?;
            leaf.suffix_commitments = Some(Box::new((c1, c2)));
        }
        Ok(())
    }

    /// Stage 3: recomputes commitments over the dirty set, deepest level
    /// first. Within each level the nodes are independent; levels at or
    /// above the configured threshold run on the work-stealing pool, smaller
    /// ones sequentially. The result is identical either way.
    pub fn recompute_commitments(&self, dirty_levels: &[Vec<NodeId>]) -> Result<()> {
        use rayon::prelude::*;
        for level in dirty_levels.iter().rev() {
            if level.is_empty() {
                continue;
            }
            if level.len() >= self.parallel_threshold {
                level
                    .par_iter()
                    .try_for_each(|id| self.recompute_node(*id))?;
            } else {
                for id in level {
                    self.recompute_node(*id)?;
                }
            }
        }
        Ok(())
    }

    fn recompute_node(&self, id: NodeId) -> Result<()> {
        let mut guard = self.manager.get_write(id)?;
        match &mut *guard {
            Node::Leaf(leaf) => self.recompute_leaf(leaf),
            Node::Inner(inner) => self.recompute_inner(inner),
            Node::Delta(delta) => {
                let result = match &mut delta.view {
                    DeltaView::Leaf(leaf) => self.recompute_leaf(leaf),
                    DeltaView::Inner(inner) => self.recompute_inner(inner),
                };
                delta.commitment_known = true;
                result
            }
        }
    }

    /// Incremental when a track is present (one value-pair update per
    /// changed slot, then an extension update per changed half, never
    /// touching the stem term), full otherwise.
    fn recompute_leaf(&self, leaf: &mut LeafNode) -> Result<()> {
        let Some(track) = leaf.track.take() else {
            let (c1, c2) = self.engine.leaf_suffix_commitments(&leaf.optional_values())?;
            leaf.c_ext = self.engine.leaf_commitment(&leaf.stem, &c1, &c2)?;
            leaf.suffix_commitments = Some(Box::new((c1, c2)));
            return Ok(());
        };
        let (old_c1, old_c2) = **leaf
            .suffix_commitments
            .as_ref()
            .expect("tracked leaf carries cached suffix commitments");
        let (mut c1, mut c2) = (old_c1, old_c2);
        for (suffix, old_value) in track.old_values {
            let old = encode_value(old_value.is_some(), &old_value.unwrap_or_default());
            let new_value = leaf.value(suffix);
            let new = encode_value(new_value.is_some(), &new_value.unwrap_or_default());
            let index = (suffix as usize % 128) * 2;
            let half = if suffix < 128 { &mut c1 } else { &mut c2 };
            *half = self.engine.update(half, index, &old.low_mod, &new.low_mod)?;
            *half = self.engine.update(half, index + 1, &old.high, &new.high)?;
        }
        let mut c_ext = leaf.c_ext;
        if c1 != old_c1 {
            c_ext = self
                .engine
                .update(&c_ext, 2, &old_c1.to_scalar(), &c1.to_scalar())?;
        }
        if c2 != old_c2 {
            c_ext = self
                .engine
                .update(&c_ext, 3, &old_c2.to_scalar(), &c2.to_scalar())?;
        }
        leaf.c_ext = c_ext;
        leaf.suffix_commitments = Some(Box::new((c1, c2)));
        Ok(())
    }

    /// Incremental per changed child when a track is present (children are
    /// already recomputed, one level below), full otherwise.
    fn recompute_inner(&self, inner: &mut InnerNode) -> Result<()> {
        if let Some(track) = inner.track.take() {
            let mut c = inner.commitment;
            for (slot, old_scalar) in track.old_scalars {
                let child = inner.child(slot);
                let new_scalar = if child.is_null() {
                    Scalar::ZERO
                } else {
                    let child_guard = self.manager.get_read(child).map_err(dangling(child))?;
                    Self::known_commitment(&child_guard)?.to_scalar()
                };
                c = self
                    .engine
                    .update(&c, slot as usize, &old_scalar, &new_scalar)?;
            }
            inner.commitment = c;
        } else {
            let children: Vec<(u8, NodeId)> = inner.iter_children().collect();
            let mut scalars = [Scalar::ZERO; 256];
            for (slot, child) in children {
                let child_guard = self.manager.get_read(child).map_err(dangling(child))?;
                scalars[slot as usize] = Self::known_commitment(&child_guard)?.to_scalar();
            }
            inner.commitment = self.engine.inner_commitment(&scalars)?;
        }
        Ok(())
    }

    /// The 32-byte root commitment for a root id (zeroes for an empty
    /// trie).
    pub fn root_commitment_bytes(&self, root: NodeId) -> Result<[u8; 32]> {
        if root.is_null() {
            return Ok(GroupElement::IDENTITY.serialize());
        }
        let guard = self.manager.get_read(root)?;
        Ok(Self::known_commitment(&guard)?.serialize())
    }
}

fn leaf_value(leaf: &LeafNode, key: &TreeKey) -> Option<[u8; 32]> {
    if leaf.stem == key.stem() {
        leaf.value(key.suffix())
    } else {
        None
    }
}

fn dangling(id: NodeId) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NotFound => Error::Corruption(format!("dangling child id {id:?}")),
        other => other,
    }
}
