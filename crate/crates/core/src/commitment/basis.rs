//! Deterministic generator derivation.

use sha2::{Digest, Sha256};

use crate::commitment::group::GroupElement;
use crate::commitment::scalar::Scalar;
use crate::error::{Error, Result};

/// An ordered list of group generators derived from a seed.
///
/// Derivation is a hash chain over `(seed, index, attempt)`, so a basis is
/// fully determined by its seed and shorter bases are prefixes of longer
/// ones. The seed is a database-creation parameter persisted in the
/// manifest.
#[derive(Clone)]
pub struct GeneratorBasis {
    seed: Vec<u8>,
    generators: Vec<GroupElement>,
}

impl GeneratorBasis {
    pub fn derive(seed: &[u8], count: usize) -> Result<GeneratorBasis> {
        if count == 0 {
            return Err(Error::invalid("generator count must be at least 1"));
        }
        let mut generators = Vec::with_capacity(count);
        for index in 0..count {
            generators.push(derive_one(seed, index as u64));
        }
        Ok(GeneratorBasis {
            seed: seed.to_vec(),
            generators,
        })
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    pub fn seed(&self) -> &[u8] {
        &self.seed
    }

    pub fn generator(&self, index: usize) -> &GroupElement {
        &self.generators[index]
    }

    pub fn generators(&self) -> &[GroupElement] {
        &self.generators
    }
}

fn derive_one(seed: &[u8], index: u64) -> GroupElement {
    // Rejection-sample until the residue is neither zero (the identity) nor
    // non-canonical; each attempt tweaks the hash input.
    for attempt in 0u64.. {
        let mut hasher = Sha256::new();
        hasher.update(b"verkledb-generator");
        hasher.update((seed.len() as u64).to_le_bytes());
        hasher.update(seed);
        hasher.update(index.to_le_bytes());
        hasher.update(attempt.to_le_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let s = Scalar::from_bytes_le(&digest);
        if !s.is_zero() {
            return GroupElement::from_scalar(s);
        }
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn derivation_is_deterministic_and_distinct() {
        let a = GeneratorBasis::derive(b"test", 256).unwrap();
        let b = GeneratorBasis::derive(b"test", 256).unwrap();
        assert_eq!(a.generators(), b.generators());

        let unique: HashSet<_> = a.generators().iter().map(|g| g.serialize()).collect();
        assert_eq!(unique.len(), 256);
        assert!(a.generators().iter().all(|g| !g.is_identity()));
    }

    #[test]
    fn shorter_basis_is_prefix() {
        let long = GeneratorBasis::derive(b"test", 256).unwrap();
        let short = GeneratorBasis::derive(b"test", 5).unwrap();
        assert_eq!(short.generators(), &long.generators()[..5]);
    }

    #[test]
    fn different_seeds_differ() {
        let a = GeneratorBasis::derive(b"seed-a", 16).unwrap();
        let b = GeneratorBasis::derive(b"seed-b", 16).unwrap();
        assert!(a
            .generators()
            .iter()
            .zip(b.generators())
            .any(|(x, y)| x != y));
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(GeneratorBasis::derive(b"test", 0).is_err());
    }
}
