//! The 256-ary node model: identifiers, in-memory node variants, the
//! specialization layout table, and the fixed-size record codecs.

mod codec;
mod layout;

pub use codec::{decode_node, encode_node, materialize_delta};
pub use layout::{NodeLayout, TagInfo, TagShape, DENSE_INNER_SIZE, DENSE_LEAF_SIZE};

use std::collections::BTreeMap;

use crate::commitment::{GroupElement, Scalar};
use crate::error::{Error, Result};

/// Size of a node identifier on disk.
pub const NODE_ID_SIZE: usize = 8;

/// Trie width: every node has up to 256 slots.
pub const WIDTH: usize = 256;

/// On-disk size of a delta change set with `m` entries: the base reference
/// plus one slot byte and a 32-byte payload per entry. The stored record
/// additionally carries a 2-byte update counter and is padded up to its
/// tag's capacity class.
pub fn delta_size(m: usize) -> usize {
    NODE_ID_SIZE + m * (1 + 32)
}

/// An 8-byte node identifier: the high byte is the specialization tag, the
/// low 56 bits index the record within that tag's file. The all-zero id is
/// the null reference (tag 0 is reserved).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct NodeId(u64);

impl NodeId {
    pub const NULL: NodeId = NodeId(0);
    pub const INDEX_BITS: u32 = 56;
    pub const MAX_INDEX: u64 = (1 << Self::INDEX_BITS) - 1;

    pub fn new(tag: u8, index: u64) -> NodeId {
        debug_assert!(index <= Self::MAX_INDEX);
        NodeId((tag as u64) << Self::INDEX_BITS | index)
    }

    pub fn tag(&self) -> u8 {
        (self.0 >> Self::INDEX_BITS) as u8
    }

    pub fn index(&self) -> u64 {
        self.0 & Self::MAX_INDEX
    }

    pub fn is_null(&self) -> bool {
        self.0 == 0
    }

    pub fn to_u64(&self) -> u64 {
        self.0
    }

    pub fn from_u64(raw: u64) -> NodeId {
        NodeId(raw)
    }
}

impl std::fmt::Debug for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_null() {
            write!(f, "NodeId(null)")
        } else {
            write!(f, "NodeId({}:{})", self.tag(), self.index())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Inner,
    Leaf,
}

/// Dirty-slot bookkeeping for an inner node, memory-only. Records, per
/// changed child slot, the scalar that the node's current commitment still
/// commits for that slot, captured the first time the slot changes within a
/// block.
#[derive(Clone, Debug, Default)]
pub struct InnerTrack {
    pub old_scalars: BTreeMap<u8, Scalar>,
}

/// Dirty-slot bookkeeping for a leaf node, memory-only. Records the
/// pre-block value (None = absent) per changed suffix.
#[derive(Clone, Debug, Default)]
pub struct LeafTrack {
    pub old_values: BTreeMap<u8, Option<[u8; 32]>>,
}

/// An inner (branching) node. The in-memory form is always the full
/// 256-slot view; sparse storage shapes exist only on disk.
#[derive(Clone)]
pub struct InnerNode {
    pub children: Box<[NodeId; WIDTH]>,
    occupied: u16,
    /// Commitment over the children's commitment scalars; current whenever
    /// the node is clean.
    pub commitment: GroupElement,
    /// Memory-only; never persisted.
    pub track: Option<Box<InnerTrack>>,
}

impl Default for InnerNode {
    fn default() -> Self {
        InnerNode {
            children: Box::new([NodeId::NULL; WIDTH]),
            occupied: 0,
            commitment: GroupElement::IDENTITY,
            track: None,
        }
    }
}

impl std::fmt::Debug for InnerNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InnerNode")
            .field("occupied", &self.occupied)
            .finish_non_exhaustive()
    }
}

impl InnerNode {
    pub fn occupied(&self) -> u16 {
        self.occupied
    }

    pub fn child(&self, slot: u8) -> NodeId {
        self.children[slot as usize]
    }

    /// Sets a child slot, keeping the occupancy counter in sync. Returns the
    /// previous id.
    pub fn set_child(&mut self, slot: u8, id: NodeId) -> NodeId {
        let prev = std::mem::replace(&mut self.children[slot as usize], id);
        match (prev.is_null(), id.is_null()) {
            (true, false) => self.occupied += 1,
            (false, true) => self.occupied -= 1,
            _ => {}
        }
        prev
    }

    pub fn iter_children(&self) -> impl Iterator<Item = (u8, NodeId)> + '_ {
        self.children
            .iter()
            .enumerate()
            .filter(|(_, id)| !id.is_null())
            .map(|(i, id)| (i as u8, *id))
    }

    pub(crate) fn recount(&mut self) {
        self.occupied = self.children.iter().filter(|id| !id.is_null()).count() as u16;
    }
}

/// A leaf (extension) node: a 31-byte stem plus up to 256 values indexed by
/// the final key byte. The presence bitmap distinguishes explicit zero
/// values from absent slots. `c_ext` is persisted; the two suffix
/// commitments are cached memory-only and rebuilt on the first write after a
/// load.
#[derive(Clone)]
pub struct LeafNode {
    pub stem: [u8; 31],
    pub values: Box<[[u8; 32]; WIDTH]>,
    present: [u64; 4],
    occupied: u16,
    pub c_ext: GroupElement,
    /// Cached (C1, C2); memory-only.
    pub suffix_commitments: Option<Box<(GroupElement, GroupElement)>>,
    /// Memory-only; never persisted.
    pub track: Option<Box<LeafTrack>>,
}

impl Default for LeafNode {
    fn default() -> Self {
        LeafNode {
            stem: [0; 31],
            values: Box::new([[0; 32]; WIDTH]),
            present: [0; 4],
            occupied: 0,
            c_ext: GroupElement::IDENTITY,
            suffix_commitments: None,
            track: None,
        }
    }
}

impl std::fmt::Debug for LeafNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LeafNode")
            .field("stem", &hex::encode(self.stem))
            .field("occupied", &self.occupied)
            .finish_non_exhaustive()
    }
}

impl LeafNode {
    pub fn new(stem: [u8; 31]) -> LeafNode {
        LeafNode {
            stem,
            ..Default::default()
        }
    }

    pub fn occupied(&self) -> u16 {
        self.occupied
    }

    pub fn is_present(&self, suffix: u8) -> bool {
        self.present[suffix as usize / 64] >> (suffix % 64) & 1 == 1
    }

    pub fn value(&self, suffix: u8) -> Option<[u8; 32]> {
        if self.is_present(suffix) {
            Some(self.values[suffix as usize])
        } else {
            None
        }
    }

    /// Writes or clears one slot; returns the previous value.
    pub fn set_value(&mut self, suffix: u8, value: Option<[u8; 32]>) -> Option<[u8; 32]> {
        let prev = self.value(suffix);
        match value {
            Some(v) => {
                if prev.is_none() {
                    self.present[suffix as usize / 64] |= 1 << (suffix % 64);
                    self.occupied += 1;
                }
                self.values[suffix as usize] = v;
            }
            None => {
                if prev.is_some() {
                    self.present[suffix as usize / 64] &= !(1 << (suffix % 64));
                    self.occupied -= 1;
                }
                self.values[suffix as usize] = [0; 32];
            }
        }
        prev
    }

    pub fn iter_values(&self) -> impl Iterator<Item = (u8, &[u8; 32])> + '_ {
        (0u8..=255)
            .filter(|&s| self.is_present(s))
            .map(|s| (s, &self.values[s as usize]))
    }

    /// The full optional-value view used for suffix-commitment computation.
    pub fn optional_values(&self) -> [Option<[u8; 32]>; WIDTH] {
        let mut out = [None; WIDTH];
        for (i, slot) in out.iter_mut().enumerate() {
            if self.is_present(i as u8) {
                *slot = Some(self.values[i]);
            }
        }
        out
    }

    pub(crate) fn set_presence_raw(&mut self, present: [u64; 4]) {
        self.present = present;
        self.occupied = present.iter().map(|w| w.count_ones() as u16).sum();
    }

    pub(crate) fn presence_raw(&self) -> [u64; 4] {
        self.present
    }
}

/// The materialized full view of a delta node.
#[derive(Clone, Debug)]
pub enum DeltaView {
    Inner(InnerNode),
    Leaf(LeafNode),
}

impl From<InnerNode> for DeltaView {
    fn from(v: InnerNode) -> DeltaView {
        DeltaView::Inner(v)
    }
}

impl From<LeafNode> for DeltaView {
    fn from(v: LeafNode) -> DeltaView {
        DeltaView::Leaf(v)
    }
}

/// An archive delta node: a base reference plus the merged set of slots
/// changed since the base was materialized. The view is a copy of the base
/// content with the change set applied, built at load time; slot reads
/// against it are constant-time. The commitment inside the view is only
/// valid once `commitment_known` is set (reconstructed lazily on the update
/// path, never during historical reads).
#[derive(Clone, Debug)]
pub struct DeltaNode {
    pub kind: NodeKind,
    pub base: NodeId,
    /// Cumulative number of slot updates applied against the base across
    /// all versions, driving base promotion.
    pub applied: u16,
    /// Merged change set, sorted by slot, distinct slots.
    pub entries: Vec<(u8, [u8; 32])>,
    pub view: DeltaView,
    pub commitment_known: bool,
}

/// A trie node of any variant.
#[derive(Clone, Debug)]
pub enum Node {
    Inner(Box<InnerNode>),
    Leaf(Box<LeafNode>),
    Delta(Box<DeltaNode>),
}

impl Node {
    pub fn kind(&self) -> NodeKind {
        match self {
            Node::Inner(_) => NodeKind::Inner,
            Node::Leaf(_) => NodeKind::Leaf,
            Node::Delta(d) => d.kind,
        }
    }

    /// The node's logical occupancy (through the view for deltas).
    pub fn occupancy(&self) -> u16 {
        match self {
            Node::Inner(n) => n.occupied(),
            Node::Leaf(n) => n.occupied(),
            Node::Delta(d) => match &d.view {
                DeltaView::Inner(n) => n.occupied(),
                DeltaView::Leaf(n) => n.occupied(),
            },
        }
    }
}

/// Converts an inner-delta payload to a child id. The id occupies the first
/// 8 bytes little-endian; a null id encodes a removed child.
pub fn payload_to_child(payload: &[u8; 32]) -> NodeId {
    NodeId::from_u64(u64::from_le_bytes(payload[..8].try_into().unwrap()))
}

pub fn child_to_payload(id: NodeId) -> [u8; 32] {
    let mut out = [0u8; 32];
    out[..8].copy_from_slice(&id.to_u64().to_le_bytes());
    out
}

/// Builds the materialized view of a delta node: the base content with the
/// change set applied. The base must match the delta's kind and must itself
/// be a base node.
pub fn materialize(
    kind: NodeKind,
    base: &Node,
    entries: &[(u8, [u8; 32])],
) -> Result<DeltaView> {
    match (kind, base) {
        (NodeKind::Inner, Node::Inner(inner)) => {
            let mut view = InnerNode {
                children: inner.children.clone(),
                occupied: inner.occupied(),
                commitment: inner.commitment,
                track: None,
            };
            for (slot, payload) in entries {
                view.set_child(*slot, payload_to_child(payload));
            }
            Ok(DeltaView::Inner(view))
        }
        (NodeKind::Leaf, Node::Leaf(leaf)) => {
            let mut view = LeafNode {
                stem: leaf.stem,
                values: leaf.values.clone(),
                present: leaf.presence_raw(),
                occupied: leaf.occupied(),
                c_ext: leaf.c_ext,
                suffix_commitments: None,
                track: None,
            };
            for (slot, payload) in entries {
                view.set_value(*slot, Some(*payload));
            }
            Ok(DeltaView::Leaf(view))
        }
        (_, Node::Delta(_)) => Err(Error::Corruption(
            "delta node references another delta node".into(),
        )),
        _ => Err(Error::Corruption(
            "delta node kind does not match its base".into(),
        )),
    }
}
