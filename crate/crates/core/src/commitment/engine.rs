//! Trie-facing commitment rules.
//!
//! Bundles a 256-generator basis with its MSM tables and implements the
//! node-level commitment formulas:
//!
//! * inner node: `Commit(s_1, ..., s_256)` over the children's commitment
//!   scalars,
//! * extension node: two suffix commitments `C1`/`C2` over the interleaved
//!   value halves, combined with the version marker and the stem into
//!   `C_ext = Commit(1, stem, s(C1), s(C2))`,
//! * incremental update `C' = C + (new - old) * G_i` for any single slot.

use std::sync::Arc;

use crate::commitment::basis::GeneratorBasis;
use crate::commitment::group::GroupElement;
use crate::commitment::msm::MsmConfig;
use crate::commitment::values::{encode_value, ValueHalves};
use crate::commitment::Scalar;
use crate::error::{Error, Result};

/// Vector width of every node commitment.
pub const VECTOR_WIDTH: usize = 256;

pub struct CommitmentEngine {
    basis: GeneratorBasis,
    msm: MsmConfig,
}

impl CommitmentEngine {
    /// Builds the engine for a database seed. Table construction is done
    /// once here; the engine is immutable afterwards and safe to share.
    pub fn new(seed: &[u8]) -> Result<Arc<CommitmentEngine>> {
        let basis = GeneratorBasis::derive(seed, VECTOR_WIDTH)?;
        let msm = MsmConfig::build(&basis);
        Ok(Arc::new(CommitmentEngine { basis, msm }))
    }

    pub fn basis(&self) -> &GeneratorBasis {
        &self.basis
    }

    pub fn msm_config(&self) -> &MsmConfig {
        &self.msm
    }

    /// `Commit(values) = sum values[i] * G_i`.
    pub fn commit(&self, values: &[Scalar]) -> Result<GroupElement> {
        if values.len() > self.basis.len() {
            return Err(Error::invalid(format!(
                "vector length {} exceeds basis length {}",
                values.len(),
                self.basis.len()
            )));
        }
        self.msm.msm(values)
    }

    /// Incremental update of slot `index` from `old` to `new`:
    /// `c + (new - old) * G_index`.
    pub fn update(
        &self,
        c: &GroupElement,
        index: usize,
        old: &Scalar,
        new: &Scalar,
    ) -> Result<GroupElement> {
        if index >= self.basis.len() {
            return Err(Error::invalid(format!(
                "slot index {index} out of range for basis of {}",
                self.basis.len()
            )));
        }
        if old == new {
            return Ok(*c);
        }
        let delta = new.sub(old);
        Ok(c.add(&self.basis.generator(index).mul(&delta)))
    }

    /// Suffix commitments of an extension node: `C1` covers slots 0..=127,
    /// `C2` covers 128..=255, each committing the interleaved
    /// `(low_mod, high)` pairs of its 128 slots as a 256-wide vector.
    pub fn leaf_suffix_commitments(
        &self,
        values: &[Option<[u8; 32]>; 256],
    ) -> Result<(GroupElement, GroupElement)> {
        let mut lower = vec![Scalar::ZERO; VECTOR_WIDTH];
        let mut upper = vec![Scalar::ZERO; VECTOR_WIDTH];
        for (slot, value) in values.iter().enumerate() {
            let halves = match value {
                Some(v) => encode_value(true, v),
                None => ValueHalves::ABSENT,
            };
            let target = if slot < 128 { &mut lower } else { &mut upper };
            let base = (slot % 128) * 2;
            target[base] = halves.low_mod;
            target[base + 1] = halves.high;
        }
        Ok((self.commit(&lower)?, self.commit(&upper)?))
    }

    /// Extension-node commitment: `Commit(1, stem, s(C1), s(C2))` over the
    /// first four generators. The version marker is fixed to 1.
    pub fn leaf_commitment(
        &self,
        stem: &[u8; 31],
        c1: &GroupElement,
        c2: &GroupElement,
    ) -> Result<GroupElement> {
        let scalars = [
            Scalar::from_u64(1),
            stem_scalar(stem),
            c1.to_scalar(),
            c2.to_scalar(),
        ];
        self.commit(&scalars)
    }

    /// Inner-node commitment over the children's commitment scalars; absent
    /// children contribute zero.
    pub fn inner_commitment(&self, child_scalars: &[Scalar; 256]) -> Result<GroupElement> {
        self.commit(child_scalars)
    }
}

/// A 31-byte stem as a field element (always < 2^248, so no reduction
/// ambiguity can arise).
pub fn stem_scalar(stem: &[u8; 31]) -> Scalar {
    Scalar::from_le_slice(stem)
}
