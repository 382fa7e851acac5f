//! Additively homomorphic vector commitments and the node-level commitment
//! rules of the trie.

mod basis;
mod engine;
mod group;
mod msm;
mod scalar;
mod values;

pub use basis::GeneratorBasis;
pub use engine::{stem_scalar, CommitmentEngine, VECTOR_WIDTH};
pub use group::{scalar_mul_count, GroupElement};
pub use msm::{naive_msm, MsmConfig, WINDOW_NARROW, WINDOW_WIDE};
pub use scalar::Scalar;
pub use values::{encode_value, ValueHalves};
