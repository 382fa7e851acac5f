//! A Verkle-trie state database.
//!
//! The crate provides two stores over one 256-ary trie design: a live store
//! with destructive in-place updates for serving the current state, and a
//! versioned archive store whose copy-on-write updates preserve every block
//! height, compressed with delta nodes. Node records are specialized by
//! occupancy; the specialization set is chosen by a dynamic program over a
//! measured occupancy histogram. Commitments are Pedersen-style vector
//! commitments maintained incrementally through a batched three-stage block
//! pipeline.

pub mod commitment;
pub mod node_manager;
pub mod nodes;
pub mod specialization;
pub mod storage;
pub mod trie;
pub mod db;
pub mod error;
pub mod harness;

pub use error::{Error, Result};
