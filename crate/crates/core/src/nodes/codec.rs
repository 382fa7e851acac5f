//! Binary codecs for the fixed-size node records.

use crate::commitment::GroupElement;
use crate::error::{Error, Result};
use crate::nodes::layout::{NodeLayout, TagShape};
use crate::nodes::{
    materialize, DeltaNode, InnerNode, LeafNode, Node, NodeId, NodeKind, WIDTH,
};

/// Encodes a node into the fixed-size record of the given tag. Fails if the
/// node does not fit the tag's shape or capacity.
pub fn encode_node(node: &Node, tag: u8, layout: &NodeLayout) -> Result<Vec<u8>> {
    let info = layout.info(tag)?;
    let mut out = vec![0u8; info.record_size];
    match (&info.shape, node) {
        (TagShape::LeafSparse { capacity }, Node::Leaf(leaf)) => {
            if leaf.occupied() > *capacity {
                return Err(Error::Encode(format!(
                    "leaf occupancy {} exceeds capacity {capacity}",
                    leaf.occupied()
                )));
            }
            out[..31].copy_from_slice(&leaf.stem);
            out[31] = leaf.occupied() as u8;
            let mut pos = 32;
            for (suffix, value) in leaf.iter_values() {
                out[pos] = suffix;
                out[pos + 1..pos + 33].copy_from_slice(value);
                pos += 33;
            }
            let tail = info.record_size - 32;
            out[tail..].copy_from_slice(&leaf.c_ext.serialize());
        }
        (TagShape::LeafDense, Node::Leaf(leaf)) => {
            out[..31].copy_from_slice(&leaf.stem);
            write_bitmap(&mut out[31..63], leaf.presence_raw());
            for i in 0..WIDTH {
                out[63 + i * 32..63 + (i + 1) * 32].copy_from_slice(&leaf.values[i]);
            }
            let tail = info.record_size - 32;
            out[tail..].copy_from_slice(&leaf.c_ext.serialize());
        }
        (TagShape::InnerSparse { capacity }, Node::Inner(inner)) => {
            if inner.occupied() > *capacity {
                return Err(Error::Encode(format!(
                    "inner occupancy {} exceeds capacity {capacity}",
                    inner.occupied()
                )));
            }
            out[0] = inner.occupied() as u8;
            let mut pos = 1;
            for (byte, id) in inner.iter_children() {
                out[pos] = byte;
                out[pos + 1..pos + 9].copy_from_slice(&id.to_u64().to_le_bytes());
                pos += 9;
            }
            let tail = info.record_size - 32;
            out[tail..].copy_from_slice(&inner.commitment.serialize());
        }
        (TagShape::InnerDense, Node::Inner(inner)) => {
            let mut bitmap = [0u64; 4];
            for (byte, id) in inner.iter_children() {
                bitmap[byte as usize / 64] |= 1 << (byte % 64);
                out[32 + byte as usize * 8..32 + (byte as usize + 1) * 8]
                    .copy_from_slice(&id.to_u64().to_le_bytes());
            }
            write_bitmap(&mut out[..32], bitmap);
            let tail = info.record_size - 32;
            out[tail..].copy_from_slice(&inner.commitment.serialize());
        }
        (TagShape::DeltaLeaf { class } | TagShape::DeltaInner { class }, Node::Delta(delta)) => {
            let expects_leaf = matches!(info.shape, TagShape::DeltaLeaf { .. });
            if expects_leaf != (delta.kind == NodeKind::Leaf) {
                return Err(Error::Encode("delta kind does not match tag".into()));
            }
            if delta.entries.is_empty() {
                return Err(Error::Encode("delta nodes must carry at least one entry".into()));
            }
            if delta.entries.len() > *class as usize {
                return Err(Error::Encode(format!(
                    "delta entry count {} exceeds class {class}",
                    delta.entries.len()
                )));
            }
            if delta.base.is_null() {
                return Err(Error::Encode("delta node has a null base".into()));
            }
            if layout.info(delta.base.tag())?.shape.is_delta() {
                return Err(Error::Encode("delta node references a delta base".into()));
            }
            out[..8].copy_from_slice(&delta.base.to_u64().to_le_bytes());
            out[8..10].copy_from_slice(&delta.applied.to_le_bytes());
            let mut pos = 10;
            for (slot, payload) in &delta.entries {
                out[pos] = *slot;
                out[pos + 1..pos + 33].copy_from_slice(payload);
                pos += 33;
            }
        }
        _ => {
            return Err(Error::Encode(format!(
                "node kind does not match tag {tag} shape"
            )));
        }
    }
    Ok(out)
}

/// Decodes a record of the given tag. Delta nodes come back without a
/// materialized view; the node manager resolves the base and calls
/// [`materialize`]. `decode_node` itself never touches storage.
pub fn decode_node(tag: u8, bytes: &[u8], layout: &NodeLayout) -> Result<Node> {
    let info = layout.info(tag)?;
    if bytes.len() != info.record_size {
        return Err(Error::Decode(format!(
            "record for tag {tag} has {} bytes, expected {}",
            bytes.len(),
            info.record_size
        )));
    }
    match info.shape {
        TagShape::LeafSparse { capacity } => {
            let mut leaf = LeafNode::new(bytes[..31].try_into().unwrap());
            let count = bytes[31] as u16;
            if count > capacity {
                return Err(Error::Decode(format!(
                    "leaf record count {count} exceeds capacity {capacity}"
                )));
            }
            let mut pos = 32;
            let mut prev: Option<u8> = None;
            for _ in 0..count {
                let suffix = bytes[pos];
                if prev.is_some_and(|p| suffix <= p) {
                    return Err(Error::Decode("leaf entries not strictly ascending".into()));
                }
                prev = Some(suffix);
                let value: [u8; 32] = bytes[pos + 1..pos + 33].try_into().unwrap();
                leaf.set_value(suffix, Some(value));
                pos += 33;
            }
            leaf.c_ext = decode_commitment(&bytes[info.record_size - 32..])?;
            Ok(Node::Leaf(Box::new(leaf)))
        }
        TagShape::LeafDense => {
            let mut leaf = LeafNode::new(bytes[..31].try_into().unwrap());
            let bitmap = read_bitmap(&bytes[31..63]);
            for i in 0..WIDTH {
                if bitmap[i / 64] >> (i % 64) & 1 == 1 {
                    leaf.values[i] = bytes[63 + i * 32..63 + (i + 1) * 32].try_into().unwrap();
                }
            }
            leaf.set_presence_raw(bitmap);
            leaf.c_ext = decode_commitment(&bytes[info.record_size - 32..])?;
            Ok(Node::Leaf(Box::new(leaf)))
        }
        TagShape::InnerSparse { capacity } => {
            let mut inner = InnerNode::default();
            let count = bytes[0] as u16;
            if count > capacity {
                return Err(Error::Decode(format!(
                    "inner record count {count} exceeds capacity {capacity}"
                )));
            }
            let mut pos = 1;
            let mut prev: Option<u8> = None;
            for _ in 0..count {
                let byte = bytes[pos];
                if prev.is_some_and(|p| byte <= p) {
                    return Err(Error::Decode("inner entries not strictly ascending".into()));
                }
                prev = Some(byte);
                let id = NodeId::from_u64(u64::from_le_bytes(
                    bytes[pos + 1..pos + 9].try_into().unwrap(),
                ));
                if id.is_null() {
                    return Err(Error::Decode("sparse inner entry with null child".into()));
                }
                inner.set_child(byte, id);
                pos += 9;
            }
            inner.commitment = decode_commitment(&bytes[info.record_size - 32..])?;
            Ok(Node::Inner(Box::new(inner)))
        }
        TagShape::InnerDense => {
            let mut inner = InnerNode::default();
            let bitmap = read_bitmap(&bytes[..32]);
            for i in 0..WIDTH {
                let id = NodeId::from_u64(u64::from_le_bytes(
                    bytes[32 + i * 8..32 + (i + 1) * 8].try_into().unwrap(),
                ));
                let marked = bitmap[i / 64] >> (i % 64) & 1 == 1;
                if marked != !id.is_null() {
                    return Err(Error::Decode(
                        "dense inner bitmap disagrees with child ids".into(),
                    ));
                }
                if !id.is_null() {
                    inner.children[i] = id;
                }
            }
            inner.recount();
            inner.commitment = decode_commitment(&bytes[info.record_size - 32..])?;
            Ok(Node::Inner(Box::new(inner)))
        }
        TagShape::DeltaLeaf { class } | TagShape::DeltaInner { class } => {
            let kind = if matches!(info.shape, TagShape::DeltaLeaf { .. }) {
                NodeKind::Leaf
            } else {
                NodeKind::Inner
            };
            let base = NodeId::from_u64(u64::from_le_bytes(bytes[..8].try_into().unwrap()));
            if base.is_null() {
                return Err(Error::Decode("delta record with null base".into()));
            }
            if layout.info(base.tag())?.shape.is_delta() {
                return Err(Error::Corruption(
                    "delta record references a delta base".into(),
                ));
            }
            let applied = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
            // Entries are sorted strictly ascending; the zero padding after
            // the last entry always breaks that order, which is how the
            // entry count is recovered without a separate length field.
            let mut entries = Vec::new();
            let mut pos = 10;
            let mut prev: Option<u8> = None;
            for _ in 0..class {
                let slot = bytes[pos];
                if prev.is_some_and(|p| slot <= p) {
                    break;
                }
                let payload: [u8; 32] = bytes[pos + 1..pos + 33].try_into().unwrap();
                entries.push((slot, payload));
                prev = Some(slot);
                pos += 33;
            }
            // A record with zero entries is never written, so the first
            // entry is always real, even at slot 0.
            let view = match kind {
                NodeKind::Leaf => super::DeltaView::Leaf(LeafNode::new([0; 31])),
                NodeKind::Inner => super::DeltaView::Inner(InnerNode::default()),
            };
            Ok(Node::Delta(Box::new(DeltaNode {
                kind,
                base,
                applied,
                entries,
                view,
                commitment_known: false,
            })))
        }
    }
}

/// Rebuilds a decoded delta's materialized view from its base node.
pub fn materialize_delta(delta: &mut DeltaNode, base: &Node) -> Result<()> {
    delta.view = materialize(delta.kind, base, &delta.entries)?;
    Ok(())
}

fn decode_commitment(bytes: &[u8]) -> Result<GroupElement> {
    GroupElement::deserialize(bytes.try_into().unwrap())
}

fn write_bitmap(out: &mut [u8], bitmap: [u64; 4]) {
    for (i, w) in bitmap.iter().enumerate() {
        out[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
}

fn read_bitmap(bytes: &[u8]) -> [u64; 4] {
    let mut out = [0u64; 4];
    for (i, w) in out.iter_mut().enumerate() {
        *w = u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nodes::{child_to_payload, DeltaView, DENSE_LEAF_SIZE};
    use proptest::prelude::*;

    fn layout() -> NodeLayout {
        NodeLayout::new(&[1, 2, 5, 18, 146, 256], &[9, 15, 21, 256], 128).unwrap()
    }

    fn tag_for(layout: &NodeLayout, shape: TagShape) -> u8 {
        layout
            .all_tags()
            .find(|t| t.shape == shape)
            .map(|t| t.tag)
            .unwrap()
    }

    #[test]
    fn leaf_round_trip_preserves_persisted_fields() {
        let layout = layout();
        let mut leaf = LeafNode::new([7; 31]);
        leaf.set_value(3, Some([1; 32]));
        let node = Node::Leaf(Box::new(leaf));

        let tag = layout.required_tag(NodeKind::Leaf, 1).unwrap();
        let bytes = encode_node(&node, tag, &layout).unwrap();
        assert_eq!(bytes.len(), layout.record_size(tag).unwrap());
        let Node::Leaf(back) = decode_node(tag, &bytes, &layout).unwrap() else {
            panic!()
        };
        assert_eq!(back.stem, [7; 31]);
        assert_eq!(back.value(3), Some([1; 32]));
        assert_eq!(back.occupied(), 1);
    }

    #[test]
    fn encode_rejects_capacity_overflow() {
        let layout = layout();
        let mut leaf = LeafNode::new([0; 31]);
        leaf.set_value(0, Some([1; 32]));
        leaf.set_value(1, Some([1; 32]));
        let node = Node::Leaf(Box::new(leaf));
        let tag1 = tag_for(&layout, TagShape::LeafSparse { capacity: 1 });
        assert!(matches!(
            encode_node(&node, tag1, &layout),
            Err(Error::Encode(_))
        ));
    }

    #[test]
    fn decode_rejects_truncated_records() {
        let layout = layout();
        let tag = tag_for(&layout, TagShape::LeafSparse { capacity: 5 });
        let bytes = vec![0u8; layout.record_size(tag).unwrap() - 1];
        assert!(matches!(
            decode_node(tag, &bytes, &layout),
            Err(Error::Decode(_))
        ));
    }

    #[test]
    fn dense_leaf_value_region_is_8192_bytes() {
        assert_eq!(DENSE_LEAF_SIZE - 31 - 32 - 32, 256 * 32);
    }

    #[test]
    fn delta_record_payload_region_matches_formula() {
        let layout = layout();
        let mut base_leaf = LeafNode::new([1; 31]);
        base_leaf.set_value(0, Some([2; 32]));
        let delta = DeltaNode {
            kind: NodeKind::Leaf,
            base: NodeId::new(tag_for(&layout, TagShape::LeafSparse { capacity: 1 }), 4),
            applied: 3,
            entries: vec![(1, [9; 32]), (5, [8; 32]), (9, [7; 32])],
            view: DeltaView::Leaf(base_leaf),
            commitment_known: false,
        };
        let tag = layout.delta_tag(NodeKind::Leaf, 3).unwrap();
        let bytes = encode_node(&Node::Delta(Box::new(delta)), tag, &layout).unwrap();
        // Class 4 record: 8-byte id + 2-byte counter + 4 * 33 entry slots.
        assert_eq!(bytes.len(), 142);
        // The meaningful payload region is S_id + m * 33 = 107 bytes.
        assert_eq!(crate::nodes::delta_size(3), 107);
        let Node::Delta(back) = decode_node(tag, &bytes, &layout).unwrap() else {
            panic!()
        };
        assert_eq!(back.entries.len(), 3);
        assert_eq!(back.applied, 3);
        assert_eq!(back.entries[2], (9, [7; 32]));
    }

    #[test]
    fn delta_first_entry_at_slot_zero_survives() {
        let layout = layout();
        let base_tag = tag_for(&layout, TagShape::InnerSparse { capacity: 9 });
        let delta = DeltaNode {
            kind: NodeKind::Inner,
            base: NodeId::new(base_tag, 0),
            applied: 1,
            entries: vec![(0, child_to_payload(NodeId::NULL))],
            view: DeltaView::Inner(InnerNode::default()),
            commitment_known: false,
        };
        let tag = layout.delta_tag(NodeKind::Inner, 1).unwrap();
        let bytes = encode_node(&Node::Delta(Box::new(delta)), tag, &layout).unwrap();
        let Node::Delta(back) = decode_node(tag, &bytes, &layout).unwrap() else {
            panic!()
        };
        assert_eq!(back.entries, vec![(0, child_to_payload(NodeId::NULL))]);
    }

    #[test]
    fn delta_base_must_not_be_a_delta_tag() {
        let layout = layout();
        let delta_tag = layout.delta_tag(NodeKind::Inner, 1).unwrap();
        let delta = DeltaNode {
            kind: NodeKind::Inner,
            base: NodeId::new(delta_tag, 0),
            applied: 1,
            entries: vec![(1, child_to_payload(NodeId::new(1, 1)))],
            view: DeltaView::Inner(InnerNode::default()),
            commitment_known: false,
        };
        assert!(encode_node(&Node::Delta(Box::new(delta)), delta_tag, &layout).is_err());
    }

    proptest! {
        #[test]
        fn leaf_codec_round_trips(
            stem in any::<[u8; 31]>(),
            slots in proptest::collection::btree_map(any::<u8>(), any::<[u8; 32]>(), 1..18),
        ) {
            let layout = layout();
            let mut leaf = LeafNode::new(stem);
            for (suffix, value) in &slots {
                leaf.set_value(*suffix, Some(*value));
            }
            let occupancy = leaf.occupied();
            let node = Node::Leaf(Box::new(leaf));
            let tag = layout.required_tag(NodeKind::Leaf, occupancy).unwrap();
            let bytes = encode_node(&node, tag, &layout).unwrap();
            prop_assert_eq!(bytes.len(), layout.record_size(tag).unwrap());
            let Node::Leaf(back) = decode_node(tag, &bytes, &layout).unwrap() else {
                return Err(TestCaseError::fail("wrong kind"));
            };
            prop_assert_eq!(back.stem, stem);
            prop_assert_eq!(back.occupied(), occupancy);
            for (suffix, value) in &slots {
                prop_assert_eq!(back.value(*suffix), Some(*value));
            }
        }

        #[test]
        fn inner_codec_round_trips(
            slots in proptest::collection::btree_map(any::<u8>(), 1u64..1_000_000, 1..22),
            dense in any::<bool>(),
        ) {
            let layout = layout();
            let mut inner = InnerNode::default();
            for (byte, idx) in &slots {
                inner.set_child(*byte, NodeId::new(1, *idx));
            }
            let occupancy = inner.occupied();
            let node = Node::Inner(Box::new(inner));
            let tag = if dense {
                tag_for(&layout, TagShape::InnerDense)
            } else {
                layout.required_tag(NodeKind::Inner, occupancy).unwrap()
            };
            let bytes = encode_node(&node, tag, &layout).unwrap();
            let Node::Inner(back) = decode_node(tag, &bytes, &layout).unwrap() else {
                return Err(TestCaseError::fail("wrong kind"));
            };
            prop_assert_eq!(back.occupied(), occupancy);
            for (byte, idx) in &slots {
                prop_assert_eq!(back.child(*byte), NodeId::new(1, *idx));
            }
        }

        #[test]
        fn delta_codec_round_trips(
            slots in proptest::collection::btree_map(any::<u8>(), any::<[u8; 32]>(), 1..128),
            applied in any::<u16>(),
        ) {
            let layout = layout();
            let entries: Vec<(u8, [u8; 32])> = slots.into_iter().collect();
            let delta = DeltaNode {
                kind: NodeKind::Leaf,
                base: NodeId::new(1, 77),
                applied,
                entries: entries.clone(),
                view: DeltaView::Leaf(LeafNode::new([0; 31])),
                commitment_known: false,
            };
            let tag = layout.delta_tag(NodeKind::Leaf, entries.len()).unwrap();
            let bytes = encode_node(&Node::Delta(Box::new(delta)), tag, &layout).unwrap();
            let Node::Delta(back) = decode_node(tag, &bytes, &layout).unwrap() else {
                return Err(TestCaseError::fail("wrong kind"));
            };
            prop_assert_eq!(back.entries, entries);
            prop_assert_eq!(back.applied, applied);
            prop_assert_eq!(back.base, NodeId::new(1, 77));
        }
    }
}
