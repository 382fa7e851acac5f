//! The account-state embedding: maps addresses, storage slots and code
//! chunks onto trie keys.
//!
//! A stem is the first 31 bytes of the compressed commitment of a five-term
//! vector over the first five generators:
//!
//! ```text
//! Commit(1, addr[0..16], addr[16..20], index[0..16], index[16..32])
//! ```
//!
//! with every term little-endian. Computing a stem costs one commitment, so
//! results are memoized per (address, tree index).
//!
//! Tree indexes carve up an account's key space:
//! * index 0: basic account data — sub-index 0 balance, 1 nonce,
//!   2 code size (3 is reserved),
//! * index `1 + j / 256`: code chunk `j` at sub-index `j % 256`,
//! * storage slot `s` (32 bytes little-endian): the low byte is the
//!   sub-index; the remaining 31 bytes form the index with a marker byte
//!   0x80 appended, keeping storage disjoint from code indexes.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::commitment::{CommitmentEngine, Scalar};
use crate::error::Result;
use crate::trie::TreeKey;

type StemCacheKey = ([u8; 20], [u8; 32]);

pub struct KeyEmbedding {
    engine: Arc<CommitmentEngine>,
    cache: Mutex<HashMap<StemCacheKey, [u8; 31]>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl KeyEmbedding {
    pub fn new(engine: Arc<CommitmentEngine>) -> KeyEmbedding {
        KeyEmbedding {
            engine,
            cache: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// (hits, misses) of the stem memo.
    pub fn cache_stats(&self) -> (u64, u64) {
        (
            self.hits.load(Ordering::Relaxed),
            self.misses.load(Ordering::Relaxed),
        )
    }

    pub fn tree_key(
        &self,
        address: &[u8; 20],
        tree_index: &[u8; 32],
        sub_index: u8,
    ) -> Result<TreeKey> {
        Ok(TreeKey::from_stem_suffix(
            self.stem(address, tree_index)?,
            sub_index,
        ))
    }

    fn stem(&self, address: &[u8; 20], tree_index: &[u8; 32]) -> Result<[u8; 31]> {
        if let Some(stem) = self.cache.lock().get(&(*address, *tree_index)) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(*stem);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);

        let scalars = [
            Scalar::from_u64(1),
            Scalar::from_le_slice(&address[..16]),
            Scalar::from_le_slice(&address[16..]),
            Scalar::from_le_slice(&tree_index[..16]),
            Scalar::from_le_slice(&tree_index[16..]),
        ];
        let commitment = self.engine.commit(&scalars)?;
        let stem: [u8; 31] = commitment.serialize()[..31].try_into().unwrap();
        self.cache.lock().insert((*address, *tree_index), stem);
        Ok(stem)
    }
}

/// Mutation builders for the account-state schema. Each returns `(key,
/// value)` pairs ready for batch assembly.
pub struct AccountOps {
    embedding: KeyEmbedding,
}

const BASIC_BALANCE: u8 = 0;
const BASIC_NONCE: u8 = 1;
const BASIC_CODE_SIZE: u8 = 2;

impl AccountOps {
    pub fn new(engine: Arc<CommitmentEngine>) -> AccountOps {
        AccountOps {
            embedding: KeyEmbedding::new(engine),
        }
    }

    pub fn embedding(&self) -> &KeyEmbedding {
        &self.embedding
    }

    pub fn set_balance(&self, address: &[u8; 20], balance: u128) -> Result<(TreeKey, [u8; 32])> {
        let mut value = [0u8; 32];
        value[..16].copy_from_slice(&balance.to_le_bytes());
        let key = self
            .embedding
            .tree_key(address, &[0u8; 32], BASIC_BALANCE)?;
        Ok((key, value))
    }

    pub fn set_nonce(&self, address: &[u8; 20], nonce: u64) -> Result<(TreeKey, [u8; 32])> {
        let mut value = [0u8; 32];
        value[..8].copy_from_slice(&nonce.to_le_bytes());
        let key = self.embedding.tree_key(address, &[0u8; 32], BASIC_NONCE)?;
        Ok((key, value))
    }

    /// Splits code into 32-byte chunks; emits the chunk writes plus the code
    /// size at the basic-data stem.
    pub fn set_code(&self, address: &[u8; 20], code: &[u8]) -> Result<Vec<(TreeKey, [u8; 32])>> {
        let mut out = Vec::with_capacity(code.len() / 32 + 2);
        let mut size_value = [0u8; 32];
        size_value[..8].copy_from_slice(&(code.len() as u64).to_le_bytes());
        out.push((
            self.embedding
                .tree_key(address, &[0u8; 32], BASIC_CODE_SIZE)?,
            size_value,
        ));
        for (j, chunk) in code.chunks(32).enumerate() {
            let mut tree_index = [0u8; 32];
            tree_index[..8].copy_from_slice(&(1 + (j as u64 >> 8)).to_le_bytes());
            let mut value = [0u8; 32];
            value[..chunk.len()].copy_from_slice(chunk);
            out.push((
                self.embedding.tree_key(address, &tree_index, j as u8)?,
                value,
            ));
        }
        Ok(out)
    }

    pub fn set_storage_slot(
        &self,
        address: &[u8; 20],
        slot: &[u8; 32],
        value: [u8; 32],
    ) -> Result<(TreeKey, [u8; 32])> {
        let mut tree_index = [0u8; 32];
        tree_index[..31].copy_from_slice(&slot[1..]);
        tree_index[31] = 0x80;
        let key = self.embedding.tree_key(address, &tree_index, slot[0])?;
        Ok((key, value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ops() -> AccountOps {
        AccountOps::new(CommitmentEngine::new(b"embedding-test").unwrap())
    }

    #[test]
    fn stems_are_memoized() {
        let ops = ops();
        let addr = [7u8; 20];
        let a = ops.set_balance(&addr, 100).unwrap();
        let (h0, m0) = ops.embedding().cache_stats();
        assert_eq!((h0, m0), (0, 1));
        let b = ops.set_nonce(&addr, 5).unwrap();
        let (h1, m1) = ops.embedding().cache_stats();
        assert_eq!((h1, m1), (1, 1));
        // Same stem, different suffix.
        assert_eq!(a.0.stem(), b.0.stem());
        assert_ne!(a.0.suffix(), b.0.suffix());
    }

    #[test]
    fn storage_slots_under_256_share_a_stem() {
        let ops = ops();
        let addr = [1u8; 20];
        let mut slot_a = [0u8; 32];
        slot_a[0] = 5;
        let mut slot_b = [0u8; 32];
        slot_b[0] = 200;
        let (ka, _) = ops.set_storage_slot(&addr, &slot_a, [1; 32]).unwrap();
        let (kb, _) = ops.set_storage_slot(&addr, &slot_b, [2; 32]).unwrap();
        assert_eq!(ka.stem(), kb.stem());
        assert_eq!(ka.suffix(), 5);
        assert_eq!(kb.suffix(), 200);

        // A slot in a different bucket lands on a different stem.
        let mut slot_c = [0u8; 32];
        slot_c[1] = 1;
        let (kc, _) = ops.set_storage_slot(&addr, &slot_c, [3; 32]).unwrap();
        assert_ne!(ka.stem(), kc.stem());
    }

    #[test]
    fn code_chunks_use_consecutive_sub_indices() {
        let ops = ops();
        let addr = [9u8; 20];
        let code = vec![0xccu8; 33 * 32]; // 33 chunks
        let muts = ops.set_code(&addr, &code).unwrap();
        // Code size plus 33 chunks.
        assert_eq!(muts.len(), 34);
        let chunk_keys = &muts[1..];
        for (j, (key, _)) in chunk_keys.iter().enumerate() {
            assert_eq!(key.suffix(), j as u8);
            assert_eq!(key.stem(), chunk_keys[0].0.stem());
        }
        // Chunk keys are distinct from the basic-data stem.
        assert_ne!(muts[0].0.stem(), chunk_keys[0].0.stem());
    }

    #[test]
    fn random_addresses_have_distinct_stems() {
        use rand::{Rng, SeedableRng};
        let ops = ops();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let mut stems = std::collections::HashSet::new();
        for _ in 0..2000 {
            let mut addr = [0u8; 20];
            rng.fill(&mut addr);
            let (key, _) = ops.set_balance(&addr, 1).unwrap();
            assert!(stems.insert(key.stem()), "stem collision");
        }
    }
}
