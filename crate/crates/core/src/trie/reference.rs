//! A naive in-memory trie used as a differential oracle.
//!
//! It follows the same structural rules as the managed tries (splits run to
//! the stem divergence level, empty nodes vanish, single-child chains are
//! never collapsed) but recomputes every commitment from scratch on demand
//! via direct scalar-multiply-and-sum, independent of both the windowed MSM
//! and the incremental update path of the production pipeline.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use crate::commitment::{encode_value, stem_scalar, CommitmentEngine, GroupElement, Scalar};
use crate::trie::batch::{partition, BatchEntry, UpdateBatch};
use crate::trie::TreeKey;

enum RefNode {
    Inner {
        children: BTreeMap<u8, RefNode>,
    },
    Leaf {
        stem: [u8; 31],
        values: BTreeMap<u8, [u8; 32]>,
    },
}

pub struct ReferenceTrie {
    engine: Arc<CommitmentEngine>,
    root: Option<RefNode>,
}

impl ReferenceTrie {
    pub fn new(engine: Arc<CommitmentEngine>) -> ReferenceTrie {
        ReferenceTrie { engine, root: None }
    }

    pub fn lookup(&self, key: &TreeKey) -> Option<[u8; 32]> {
        let mut node = self.root.as_ref()?;
        let mut depth = 0;
        loop {
            match node {
                RefNode::Inner { children } => {
                    node = children.get(&key.as_bytes()[depth])?;
                    depth += 1;
                }
                RefNode::Leaf { stem, values } => {
                    return if *stem == key.stem() {
                        values.get(&key.suffix()).copied()
                    } else {
                        None
                    };
                }
            }
        }
    }

    pub fn apply_block(&mut self, batch: &UpdateBatch) {
        if batch.is_empty() {
            return;
        }
        let root = self.root.take();
        self.root = apply(root, batch.entries(), 0..batch.len(), 0);
    }

    /// Root commitment by full recomputation of the entire trie.
    pub fn root_commitment(&self) -> [u8; 32] {
        match &self.root {
            None => GroupElement::IDENTITY.serialize(),
            Some(node) => self.commitment_of(node).serialize(),
        }
    }

    fn commitment_of(&self, node: &RefNode) -> GroupElement {
        match node {
            RefNode::Inner { children } => {
                let mut acc = GroupElement::IDENTITY;
                for (byte, child) in children {
                    let scalar = self.commitment_of(child).to_scalar();
                    acc = acc.add(&self.engine.basis().generator(*byte as usize).mul(&scalar));
                }
                acc
            }
            RefNode::Leaf { stem, values } => {
                let mut c1 = GroupElement::IDENTITY;
                let mut c2 = GroupElement::IDENTITY;
                for (suffix, value) in values {
                    let halves = encode_value(true, value);
                    let index = (*suffix as usize % 128) * 2;
                    let target = if *suffix < 128 { &mut c1 } else { &mut c2 };
                    *target = target
                        .add(&self.engine.basis().generator(index).mul(&halves.low_mod))
                        .add(&self.engine.basis().generator(index + 1).mul(&halves.high));
                }
                let terms = [
                    Scalar::from_u64(1),
                    stem_scalar(stem),
                    c1.to_scalar(),
                    c2.to_scalar(),
                ];
                let mut ext = GroupElement::IDENTITY;
                for (i, t) in terms.iter().enumerate() {
                    ext = ext.add(&self.engine.basis().generator(i).mul(t));
                }
                ext
            }
        }
    }
}

fn apply(
    node: Option<RefNode>,
    batch: &[BatchEntry],
    range: Range<usize>,
    depth: usize,
) -> Option<RefNode> {
    match node {
        None => build_fresh(None, batch, range, depth),
        Some(RefNode::Inner { mut children }) => {
            let base = range.start;
            for (byte, r) in partition(&batch[range], depth) {
                let abs = base + r.start..base + r.end;
                let child = children.remove(&byte);
                if let Some(new_child) = apply(child, batch, abs, depth + 1) {
                    children.insert(byte, new_child);
                }
            }
            if children.is_empty() {
                None
            } else {
                Some(RefNode::Inner { children })
            }
        }
        Some(RefNode::Leaf { stem, mut values }) => {
            let splits = batch[range.clone()]
                .iter()
                .any(|e| e.key.stem() != stem && e.value.is_some());
            if splits {
                return build_fresh(Some((stem, values)), batch, range, depth);
            }
            for e in &batch[range] {
                if e.key.stem() != stem {
                    continue;
                }
                match e.value {
                    Some(v) => {
                        values.insert(e.key.suffix(), v);
                    }
                    None => {
                        values.remove(&e.key.suffix());
                    }
                }
            }
            if values.is_empty() {
                None
            } else {
                Some(RefNode::Leaf { stem, values })
            }
        }
    }
}

type DisplacedLeaf = ([u8; 31], BTreeMap<u8, [u8; 32]>);

fn build_fresh(
    displaced: Option<DisplacedLeaf>,
    batch: &[BatchEntry],
    range: Range<usize>,
    depth: usize,
) -> Option<RefNode> {
    let displaced_stem = displaced.as_ref().map(|(s, _)| *s);
    let has_effective = batch[range.clone()]
        .iter()
        .any(|e| e.value.is_some() || Some(e.key.stem()) == displaced_stem);
    if !has_effective {
        return displaced.map(|(stem, values)| RefNode::Leaf { stem, values });
    }

    let mut insert_stems: Vec<[u8; 31]> = batch[range.clone()]
        .iter()
        .filter(|e| e.value.is_some())
        .map(|e| e.key.stem())
        .collect();
    insert_stems.dedup();

    match displaced {
        None if insert_stems.len() == 1 => {
            let mut values = BTreeMap::new();
            for e in &batch[range] {
                if let Some(v) = e.value {
                    values.insert(e.key.suffix(), v);
                }
            }
            Some(RefNode::Leaf {
                stem: insert_stems[0],
                values,
            })
        }
        Some((stem, values)) if insert_stems.iter().all(|s| *s == stem) => apply(
            Some(RefNode::Leaf { stem, values }),
            batch,
            range,
            depth,
        ),
        _ => {
            let base = range.start;
            let displaced_byte = displaced_stem.map(|s| s[depth]);
            let mut children = BTreeMap::new();
            let mut displaced_handled = false;
            for (byte, r) in partition(&batch[range], depth) {
                let abs = base + r.start..base + r.end;
                let carries = Some(byte) == displaced_byte;
                let child = if carries {
                    displaced_handled = true;
                    build_fresh(displaced.clone(), batch, abs, depth + 1)
                } else {
                    build_fresh(None, batch, abs, depth + 1)
                };
                if let Some(child) = child {
                    children.insert(byte, child);
                }
            }
            if let (Some(byte), false) = (displaced_byte, displaced_handled) {
                let (stem, values) = displaced.unwrap();
                children.insert(byte, RefNode::Leaf { stem, values });
            }
            if children.is_empty() {
                None
            } else {
                Some(RefNode::Inner { children })
            }
        }
    }
}
