//! The specialization layout table: tag assignments and fixed record sizes.
//!
//! Record shapes (all integers little-endian, unoccupied capacity
//! zero-filled):
//!
//! * sparse leaf, capacity c:  `[stem 31][count u8][c x (suffix u8, value 32)][c_ext 32]`
//! * dense leaf (256):         `[stem 31][presence bitmap 32][256 x value 32][c_ext 32]`
//! * sparse inner, capacity c: `[count u8][c x (child u8, id u64)][commitment 32]`
//! * dense inner (256):        `[presence bitmap 32][256 x id u64][commitment 32]`
//! * delta, class c:           `[base id u64][applied u16][c x (slot u8, payload 32)]`
//!
//! Sparse entries are sorted by slot byte. Dense variants drop the per-entry
//! slot byte, which is why they undercut large sparse variants; the
//! crossover occupancy is computed from these formulas, not assumed.

use crate::error::{Error, Result};
use crate::nodes::{NodeKind, WIDTH};
use crate::specialization::SpaceFunction;

pub const DENSE_LEAF_SIZE: usize = 31 + 32 + WIDTH * 32 + 32;
pub const DENSE_INNER_SIZE: usize = 32 + WIDTH * 8 + 32;

pub fn sparse_leaf_size(capacity: u16) -> usize {
    31 + 1 + capacity as usize * 33 + 32
}

pub fn sparse_inner_size(capacity: u16) -> usize {
    1 + capacity as usize * 9 + 32
}

pub fn delta_record_size(class: u16) -> usize {
    8 + 2 + class as usize * 33
}

/// The storage shape behind one tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagShape {
    LeafSparse { capacity: u16 },
    LeafDense,
    InnerSparse { capacity: u16 },
    InnerDense,
    DeltaLeaf { class: u16 },
    DeltaInner { class: u16 },
}

impl TagShape {
    pub fn record_size(&self) -> usize {
        match self {
            TagShape::LeafSparse { capacity } => sparse_leaf_size(*capacity),
            TagShape::LeafDense => DENSE_LEAF_SIZE,
            TagShape::InnerSparse { capacity } => sparse_inner_size(*capacity),
            TagShape::InnerDense => DENSE_INNER_SIZE,
            TagShape::DeltaLeaf { class } | TagShape::DeltaInner { class } => {
                delta_record_size(*class)
            }
        }
    }

    pub fn capacity(&self) -> u16 {
        match self {
            TagShape::LeafSparse { capacity } | TagShape::InnerSparse { capacity } => *capacity,
            TagShape::LeafDense | TagShape::InnerDense => WIDTH as u16,
            TagShape::DeltaLeaf { class } | TagShape::DeltaInner { class } => *class,
        }
    }

    pub fn is_delta(&self) -> bool {
        matches!(self, TagShape::DeltaLeaf { .. } | TagShape::DeltaInner { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TagInfo {
    pub tag: u8,
    pub shape: TagShape,
    pub record_size: usize,
}

/// Tag table derived from the specialization plan and the delta threshold.
/// Tag 0 is reserved for the null id; tags are assigned deterministically
/// (leaf capacities ascending, inner capacities ascending, delta-leaf
/// classes, delta-inner classes), so a (plan, tau) pair always yields the
/// same table.
#[derive(Clone, Debug)]
pub struct NodeLayout {
    tags: Vec<Option<TagInfo>>,
    leaf_caps: Vec<u16>,
    leaf_tags: Vec<u8>,
    inner_caps: Vec<u16>,
    inner_tags: Vec<u8>,
    delta_classes: Vec<u16>,
    delta_leaf_tags: Vec<u8>,
    delta_inner_tags: Vec<u8>,
    tau: u16,
}

impl NodeLayout {
    pub fn new(leaf_caps: &[u16], inner_caps: &[u16], tau: u16) -> Result<NodeLayout> {
        validate_caps(leaf_caps, "leaf")?;
        validate_caps(inner_caps, "inner")?;
        if tau == 0 || tau as usize > WIDTH {
            return Err(Error::invalid("tau must be in 1..=256"));
        }

        let delta_classes = delta_classes(tau);
        let total = 1 + leaf_caps.len() + inner_caps.len() + 2 * delta_classes.len();
        if total > u8::MAX as usize {
            return Err(Error::invalid("specialization plan exceeds the tag space"));
        }

        let mut tags: Vec<Option<TagInfo>> = vec![None; total];
        let mut next = 1u8;
        let mut assign = |shape: TagShape, tags: &mut Vec<Option<TagInfo>>| -> u8 {
            let tag = next;
            tags[tag as usize] = Some(TagInfo {
                tag,
                shape,
                record_size: shape.record_size(),
            });
            next += 1;
            tag
        };

        let leaf_tags: Vec<u8> = leaf_caps
            .iter()
            .map(|&c| {
                let shape = if c as usize == WIDTH {
                    TagShape::LeafDense
                } else {
                    TagShape::LeafSparse { capacity: c }
                };
                assign(shape, &mut tags)
            })
            .collect();
        let inner_tags: Vec<u8> = inner_caps
            .iter()
            .map(|&c| {
                let shape = if c as usize == WIDTH {
                    TagShape::InnerDense
                } else {
                    TagShape::InnerSparse { capacity: c }
                };
                assign(shape, &mut tags)
            })
            .collect();
        let delta_leaf_tags: Vec<u8> = delta_classes
            .iter()
            .map(|&c| assign(TagShape::DeltaLeaf { class: c }, &mut tags))
            .collect();
        let delta_inner_tags: Vec<u8> = delta_classes
            .iter()
            .map(|&c| assign(TagShape::DeltaInner { class: c }, &mut tags))
            .collect();

        Ok(NodeLayout {
            tags,
            leaf_caps: leaf_caps.to_vec(),
            leaf_tags,
            inner_caps: inner_caps.to_vec(),
            inner_tags,
            delta_classes,
            delta_leaf_tags,
            delta_inner_tags,
            tau,
        })
    }

    pub fn tau(&self) -> u16 {
        self.tau
    }

    pub fn leaf_capacities(&self) -> &[u16] {
        &self.leaf_caps
    }

    pub fn inner_capacities(&self) -> &[u16] {
        &self.inner_caps
    }

    pub fn info(&self, tag: u8) -> Result<&TagInfo> {
        self.tags
            .get(tag as usize)
            .and_then(|t| t.as_ref())
            .ok_or_else(|| Error::Corruption(format!("unknown node tag {tag}")))
    }

    pub fn record_size(&self, tag: u8) -> Result<usize> {
        Ok(self.info(tag)?.record_size)
    }

    pub fn all_tags(&self) -> impl Iterator<Item = &TagInfo> {
        self.tags.iter().filter_map(|t| t.as_ref())
    }

    /// The smallest specialization with capacity >= occupancy (subsumption).
    /// Zero occupancy is a caller error: empty nodes are deleted, never
    /// stored.
    pub fn required_tag(&self, kind: NodeKind, occupancy: u16) -> Result<u8> {
        if occupancy == 0 {
            return Err(Error::invalid(
                "zero-occupancy nodes must be deleted, not stored",
            ));
        }
        let (caps, tags) = match kind {
            NodeKind::Leaf => (&self.leaf_caps, &self.leaf_tags),
            NodeKind::Inner => (&self.inner_caps, &self.inner_tags),
        };
        match caps.iter().position(|&c| c >= occupancy) {
            Some(i) => Ok(tags[i]),
            None => Err(Error::invalid(format!(
                "occupancy {occupancy} exceeds the largest capacity"
            ))),
        }
    }

    /// The smallest delta class holding `m` entries, if `m <= tau`.
    pub fn delta_tag(&self, kind: NodeKind, m: usize) -> Result<u8> {
        if m == 0 || m > self.tau as usize {
            return Err(Error::invalid(format!(
                "delta entry count {m} outside 1..={}",
                self.tau
            )));
        }
        let i = self
            .delta_classes
            .iter()
            .position(|&c| c as usize >= m)
            .expect("classes end at tau");
        Ok(match kind {
            NodeKind::Leaf => self.delta_leaf_tags[i],
            NodeKind::Inner => self.delta_inner_tags[i],
        })
    }

    /// Space function over all 256 occupancy levels for the given kind:
    /// sparse cost below 256, dense cost at 256. Not monotone once the dense
    /// variant undercuts large sparse variants; feed it through the envelope
    /// before solving.
    pub fn space_function(kind: NodeKind) -> SpaceFunction {
        let costs: Vec<u64> = (1..=WIDTH as u16)
            .map(|c| match kind {
                NodeKind::Leaf if c as usize == WIDTH => DENSE_LEAF_SIZE as u64,
                NodeKind::Leaf => sparse_leaf_size(c) as u64,
                NodeKind::Inner if c as usize == WIDTH => DENSE_INNER_SIZE as u64,
                NodeKind::Inner => sparse_inner_size(c) as u64,
            })
            .collect();
        SpaceFunction::new(costs).expect("non-empty positive costs")
    }

    /// First occupancy at which the dense representation is strictly cheaper
    /// than the sparse one.
    pub fn dense_crossover(kind: NodeKind) -> u16 {
        let (dense, per_slot, overhead) = match kind {
            NodeKind::Leaf => (DENSE_LEAF_SIZE, 33, 31 + 1 + 32),
            NodeKind::Inner => (DENSE_INNER_SIZE, 9, 1 + 32),
        };
        let mut c = 1u16;
        while (overhead + per_slot * c as usize) <= dense && (c as usize) < WIDTH {
            c += 1;
        }
        c
    }
}

fn validate_caps(caps: &[u16], kind: &str) -> Result<()> {
    if caps.is_empty() {
        return Err(Error::invalid(format!("{kind} capacities must not be empty")));
    }
    if !caps.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::invalid(format!(
            "{kind} capacities must be strictly ascending"
        )));
    }
    if caps[0] == 0 {
        return Err(Error::invalid(format!("{kind} capacity 0 is invalid")));
    }
    if *caps.last().unwrap() as usize != WIDTH {
        return Err(Error::invalid(format!(
            "{kind} capacities must include {WIDTH} to cover every occupancy"
        )));
    }
    Ok(())
}

/// Delta capacity classes: powers of two up to tau, with tau itself as the
/// final class.
fn delta_classes(tau: u16) -> Vec<u16> {
    let mut classes = Vec::new();
    let mut c = 1u16;
    while c < tau {
        classes.push(c);
        c = c.saturating_mul(2);
    }
    classes.push(tau);
    classes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_layout() -> NodeLayout {
        NodeLayout::new(&[1, 2, 5, 18, 146, 256], &[9, 15, 21, 256], 128).unwrap()
    }

    #[test]
    fn record_sizes_match_formulas() {
        let layout = default_layout();
        for info in layout.all_tags() {
            assert_eq!(info.record_size, info.shape.record_size());
        }
        assert_eq!(DENSE_LEAF_SIZE, 8287);
        assert_eq!(DENSE_INNER_SIZE, 2112);
        assert_eq!(sparse_leaf_size(1), 97);
        assert_eq!(sparse_inner_size(9), 114);
        assert_eq!(delta_record_size(4), 142);
    }

    #[test]
    fn required_tag_picks_smallest_covering_capacity() {
        let layout = default_layout();
        let info = |tag| layout.info(tag).unwrap().shape;

        let t = layout.required_tag(NodeKind::Leaf, 3).unwrap();
        assert_eq!(info(t), TagShape::LeafSparse { capacity: 5 });

        let t = layout.required_tag(NodeKind::Leaf, 256).unwrap();
        assert_eq!(info(t), TagShape::LeafDense);

        let t = layout.required_tag(NodeKind::Inner, 10).unwrap();
        assert_eq!(info(t), TagShape::InnerSparse { capacity: 15 });

        assert!(layout.required_tag(NodeKind::Leaf, 0).is_err());
    }

    #[test]
    fn delta_classes_cover_one_to_tau() {
        let layout = default_layout();
        assert_eq!(layout.delta_classes, vec![1, 2, 4, 8, 16, 32, 64, 128]);
        let tag = layout.delta_tag(NodeKind::Inner, 4).unwrap();
        assert_eq!(
            layout.info(tag).unwrap().shape,
            TagShape::DeltaInner { class: 4 }
        );
        let tag = layout.delta_tag(NodeKind::Leaf, 3).unwrap();
        assert_eq!(
            layout.info(tag).unwrap().shape,
            TagShape::DeltaLeaf { class: 4 }
        );
        assert!(layout.delta_tag(NodeKind::Leaf, 0).is_err());
        assert!(layout.delta_tag(NodeKind::Leaf, 129).is_err());

        let small = NodeLayout::new(&[256], &[256], 4).unwrap();
        assert_eq!(small.delta_classes, vec![1, 2, 4]);
        let odd = NodeLayout::new(&[256], &[256], 100).unwrap();
        assert_eq!(odd.delta_classes, vec![1, 2, 4, 8, 16, 32, 64, 100]);
    }

    #[test]
    fn capacity_validation() {
        assert!(NodeLayout::new(&[], &[256], 4).is_err());
        assert!(NodeLayout::new(&[1, 2], &[256], 4).is_err()); // missing 256
        assert!(NodeLayout::new(&[2, 1, 256], &[256], 4).is_err());
        assert!(NodeLayout::new(&[0, 256], &[256], 4).is_err());
        assert!(NodeLayout::new(&[256], &[256], 0).is_err());
    }

    #[test]
    fn tags_are_deterministic_and_distinct() {
        let a = default_layout();
        let b = default_layout();
        let tags_a: Vec<u8> = a.all_tags().map(|t| t.tag).collect();
        let tags_b: Vec<u8> = b.all_tags().map(|t| t.tag).collect();
        assert_eq!(tags_a, tags_b);
        assert!(!tags_a.contains(&0));
        let mut sorted = tags_a.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), tags_a.len());
    }

    #[test]
    fn dense_crossover_is_computed_from_the_layout() {
        // Leaf: 64 + 33c > 8287 from c = 250 onward.
        assert_eq!(NodeLayout::dense_crossover(NodeKind::Leaf), 250);
        // Inner: 33 + 9c > 2112 from c = 232 onward.
        assert_eq!(NodeLayout::dense_crossover(NodeKind::Inner), 232);

        // The envelope of the layout's space function flattens the tail at
        // the dense cost.
        use crate::specialization::monotone_envelope;
        let s = NodeLayout::space_function(NodeKind::Leaf);
        let env = monotone_envelope(&s);
        assert_eq!(env.byte_cost(250), DENSE_LEAF_SIZE as u64);
        assert_eq!(env.byte_cost(249), s.byte_cost(249));
    }
}
