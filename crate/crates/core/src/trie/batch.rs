//! Update batches: sorted, deduplicated per-block mutation lists and their
//! zero-copy partitioning into per-child sub-batches.

use crate::trie::TreeKey;

/// One mutation: a write of a 32-byte value or a deletion (`None`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchEntry {
    pub key: TreeKey,
    pub value: Option<[u8; 32]>,
}

/// A block's mutations, sorted lexicographically by key with at most one
/// entry per key (the last write wins).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateBatch {
    entries: Vec<BatchEntry>,
}

impl UpdateBatch {
    /// Sorts and deduplicates an unordered mutation list. Later occurrences
    /// of a key supersede earlier ones.
    pub fn assemble(mutations: Vec<(TreeKey, Option<[u8; 32]>)>) -> UpdateBatch {
        let mut entries: Vec<BatchEntry> = mutations
            .into_iter()
            .map(|(key, value)| BatchEntry { key, value })
            .collect();
        // Stable sort keeps input order within equal keys, so the last
        // entry of each run is the last write.
        entries.sort_by_key(|e| e.key);
        entries.dedup_by(|later, earlier| {
            if later.key == earlier.key {
                *earlier = *later;
                true
            } else {
                false
            }
        });
        UpdateBatch { entries }
    }

    pub fn entries(&self) -> &[BatchEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Splits a sub-batch (all of whose keys share a prefix of length `depth`)
/// by the key byte at `depth`. One linear scan; the returned ranges are
/// contiguous, disjoint, cover the input, and ascend by child byte.
pub fn partition(entries: &[BatchEntry], depth: usize) -> Vec<(u8, std::ops::Range<usize>)> {
    debug_assert!(depth < 32);
    let mut out = Vec::new();
    let mut start = 0;
    while start < entries.len() {
        let byte = entries[start].key.as_bytes()[depth];
        let mut end = start + 1;
        while end < entries.len() && entries[end].key.as_bytes()[depth] == byte {
            end += 1;
        }
        out.push((byte, start..end));
        start = end;
    }
    out
}
