//! The commutative-group backend used for vector commitments.
//!
//! The commitment layer only relies on the algebraic contract of a
//! prime-order group: associative/commutative addition with identity and
//! inverses, and a scalar multiplication that distributes over addition.
//! This backend instantiates that contract with the additive group of
//! integers mod p, where scalar multiplication is plain modular
//! multiplication. Every algebraic law tested by this crate holds exactly,
//! the representation is a canonical 32-byte residue, and operations cost a
//! handful of word multiplications. It is deliberately not hiding or binding
//! in any cryptographic sense and must never be used where security matters;
//! a production deployment swaps in a prime-order elliptic-curve group behind
//! the same type.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::commitment::scalar::Scalar;
use crate::error::{Error, Result};

/// Counts scalar multiplications performed by the backend since process
/// start. Used by tests to verify that incremental update paths perform the
/// predicted number of group operations.
static SCALAR_MULS: AtomicU64 = AtomicU64::new(0);

pub fn scalar_mul_count() -> u64 {
    SCALAR_MULS.load(Ordering::Relaxed)
}

/// An element of the commitment group.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GroupElement(Scalar);

impl std::fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GroupElement(0x{})", hex::encode(self.serialize()))
    }
}

impl GroupElement {
    /// The group identity.
    pub const IDENTITY: GroupElement = GroupElement(Scalar::ZERO);

    pub fn is_identity(&self) -> bool {
        self.0.is_zero()
    }

    pub fn add(&self, other: &GroupElement) -> GroupElement {
        GroupElement(self.0.add(&other.0))
    }

    pub fn sub(&self, other: &GroupElement) -> GroupElement {
        GroupElement(self.0.sub(&other.0))
    }

    pub fn neg(&self) -> GroupElement {
        GroupElement(self.0.neg())
    }

    /// Scalar multiplication `s * self`.
    pub fn mul(&self, s: &Scalar) -> GroupElement {
        SCALAR_MULS.fetch_add(1, Ordering::Relaxed);
        GroupElement(self.0.mul(s))
    }

    /// Compressed 32-byte encoding. For this backend the residue itself is
    /// canonical and fits in 32 bytes (p < 2^253).
    pub fn serialize(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    /// Inverse of [`GroupElement::serialize`]. Rejects non-canonical
    /// encodings (values >= p).
    pub fn deserialize(bytes: &[u8; 32]) -> Result<GroupElement> {
        let s = Scalar::from_bytes_le(bytes);
        if s.to_bytes() != *bytes {
            return Err(Error::Decode(
                "group element encoding is not canonical".into(),
            ));
        }
        Ok(GroupElement(s))
    }

    /// Maps a group element to a scalar entry of a parent's committed
    /// vector: the compressed encoding interpreted little-endian, reduced
    /// mod p. Deterministic by construction.
    pub fn to_scalar(&self) -> Scalar {
        Scalar::from_bytes_le(&self.serialize())
    }

    /// Backend-internal constructor for generator derivation.
    pub(crate) fn from_scalar(s: Scalar) -> GroupElement {
        GroupElement(s)
    }
}
