//! Differential tests: the managed tries against a plain map and the naive
//! reference trie, across randomized block sequences.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use verkledb::commitment::CommitmentEngine;
use verkledb::db::{ArchiveDb, DbOptions, LiveDb};
use verkledb::storage::FormatConfig;
use verkledb::trie::{ReferenceTrie, TreeKey, UpdateBatch};

/// Skewed key generator: a bounded pool of stems so blocks revisit leaves,
/// splits, growth and deletions all occur.
struct KeyGen {
    rng: ChaCha8Rng,
    stems: Vec<[u8; 31]>,
}

impl KeyGen {
    fn new(seed: u64, stem_pool: usize, clustered: bool) -> KeyGen {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stems = Vec::with_capacity(stem_pool);
        for _ in 0..stem_pool {
            let mut stem = [0u8; 31];
            rng.fill(&mut stem[..]);
            if clustered {
                // Shared prefixes force deep splits and inner chains.
                stem[0] = rng.gen_range(0..4);
                stem[1] = rng.gen_range(0..4);
            }
            stems.push(stem);
        }
        KeyGen { rng, stems }
    }

    fn key(&mut self) -> TreeKey {
        let stem = self.stems[self.rng.gen_range(0..self.stems.len())];
        // Few suffixes per stem so occupancy stays low but collisions occur.
        let suffix = self.rng.gen_range(0..6);
        TreeKey::from_stem_suffix(stem, suffix)
    }

    fn block(&mut self, size: usize, delete_ratio: f64) -> Vec<(TreeKey, Option<[u8; 32]>)> {
        let mut muts = Vec::with_capacity(size);
        for _ in 0..size {
            let key = self.key();
            if self.rng.gen_bool(delete_ratio) {
                muts.push((key, None));
            } else {
                let mut value = [0u8; 32];
                self.rng.fill(&mut value);
                muts.push((key, Some(value)));
            }
        }
        muts
    }
}

fn small_format() -> FormatConfig {
    FormatConfig::default()
}

#[test]
fn live_matches_reference_over_random_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let db = LiveDb::create(dir.path(), small_format(), &DbOptions::default()).unwrap();
    let engine = CommitmentEngine::new(&db.store().format().seed).unwrap();
    let mut reference = ReferenceTrie::new(engine);
    let mut map: BTreeMap<TreeKey, [u8; 32]> = BTreeMap::new();
    let mut gen = KeyGen::new(1, 40, true);

    for block in 0..60 {
        let muts = gen.block(30, 0.25);
        let batch = UpdateBatch::assemble(muts);
        for e in batch.entries() {
            match e.value {
                Some(v) => {
                    map.insert(e.key, v);
                }
                None => {
                    map.remove(&e.key);
                }
            }
        }
        let root = db.apply_block(&batch).unwrap();
        reference.apply_block(&batch);
        assert_eq!(
            root,
            reference.root_commitment(),
            "root mismatch at block {block}"
        );
    }

    // Every key agrees with the plain map.
    for (key, value) in &map {
        assert_eq!(db.lookup(key).unwrap(), Some(*value));
    }
    // Spot-check absent keys.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let mut raw = [0u8; 32];
        rng.fill(&mut raw);
        let key = TreeKey::new(raw);
        if !map.contains_key(&key) {
            assert_eq!(db.lookup(&key).unwrap(), None);
        }
    }
}

#[test]
fn live_incremental_root_equals_full_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let db = LiveDb::create(dir.path(), small_format(), &DbOptions::default()).unwrap();
    let mut gen = KeyGen::new(7, 24, true);

    for _ in 0..25 {
        let batch = UpdateBatch::assemble(gen.block(20, 0.3));
        let incremental = db.apply_block(&batch).unwrap();
        let full = full_recompute(&db);
        assert_eq!(incremental, full);
    }
}

/// From-scratch recomputation over the real trie, through an independent
/// engine instance, ignoring every cached commitment.
fn full_recompute(db: &LiveDb) -> [u8; 32] {
    use verkledb::commitment::{encode_value, stem_scalar, GroupElement, Scalar};
    use verkledb::nodes::{Node, NodeId};

    let engine = CommitmentEngine::new(&db.store().format().seed).unwrap();
    fn walk(
        db: &LiveDb,
        engine: &Arc<CommitmentEngine>,
        id: NodeId,
    ) -> GroupElement {
        let guard = db.trie().core().manager.get_read(id).unwrap();
        match &*guard {
            Node::Inner(inner) => {
                let children: Vec<(u8, NodeId)> = inner.iter_children().collect();
                drop(guard);
                let mut acc = GroupElement::IDENTITY;
                for (slot, child) in children {
                    let c = walk(db, engine, child);
                    acc = acc.add(&engine.basis().generator(slot as usize).mul(&c.to_scalar()));
                }
                acc
            }
            Node::Leaf(leaf) => {
                let mut c1 = GroupElement::IDENTITY;
                let mut c2 = GroupElement::IDENTITY;
                for (suffix, value) in leaf.iter_values() {
                    let halves = encode_value(true, value);
                    let index = (suffix as usize % 128) * 2;
                    let target = if suffix < 128 { &mut c1 } else { &mut c2 };
                    *target = target
                        .add(&engine.basis().generator(index).mul(&halves.low_mod))
                        .add(&engine.basis().generator(index + 1).mul(&halves.high));
                }
                let terms = [
                    Scalar::from_u64(1),
                    stem_scalar(&leaf.stem),
                    c1.to_scalar(),
                    c2.to_scalar(),
                ];
                let mut ext = GroupElement::IDENTITY;
                for (i, t) in terms.iter().enumerate() {
                    ext = ext.add(&engine.basis().generator(i).mul(t));
                }
                ext
            }
            Node::Delta(_) => panic!("live trie holds no delta nodes"),
        }
    }

    let root = db.trie().root();
    if root.is_null() {
        GroupElement::IDENTITY.serialize()
    } else {
        walk(db, &engine, root).serialize()
    }
}

#[test]
fn archive_time_travel_matches_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let db = ArchiveDb::create(dir.path(), small_format(), &DbOptions::default()).unwrap();
    let mut gen = KeyGen::new(3, 30, true);

    // Per-key write history for exact snapshot answers.
    let mut history: BTreeMap<TreeKey, Vec<(u64, Option<[u8; 32]>)>> = BTreeMap::new();
    let blocks = 40u64;
    for height in 0..blocks {
        let batch = UpdateBatch::assemble(gen.block(20, 0.25));
        for e in batch.entries() {
            history.entry(e.key).or_default().push((height, e.value));
        }
        db.apply_block(&batch, height).unwrap();
    }

    let value_at = |key: &TreeKey, height: u64| -> Option<[u8; 32]> {
        let writes = history.get(key)?;
        writes
            .iter()
            .take_while(|(h, _)| *h <= height)
            .last()
            .and_then(|(_, v)| *v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let keys: Vec<TreeKey> = history.keys().copied().collect();
    for _ in 0..2000 {
        let key = keys[rng.gen_range(0..keys.len())];
        let height = rng.gen_range(0..blocks);
        assert_eq!(
            db.lookup_at(&key, height).unwrap(),
            value_at(&key, height),
            "mismatch at height {height}"
        );
    }

    // Future heights are rejected.
    assert!(db.lookup_at(&keys[0], blocks).is_err());
}

#[test]
fn archive_and_live_produce_identical_roots() {
    let live_dir = tempfile::tempdir().unwrap();
    let archive_dir = tempfile::tempdir().unwrap();
    let live = LiveDb::create(live_dir.path(), small_format(), &DbOptions::default()).unwrap();
    let archive =
        ArchiveDb::create(archive_dir.path(), small_format(), &DbOptions::default()).unwrap();
    let mut gen = KeyGen::new(11, 30, true);

    for height in 0..30 {
        let batch = UpdateBatch::assemble(gen.block(25, 0.2));
        let live_root = live.apply_block(&batch).unwrap();
        let (_, archive_root) = archive.apply_block(&batch, height).unwrap();
        assert_eq!(live_root, archive_root, "divergence at height {height}");
    }
}

#[test]
fn archive_delta_nodes_never_chain_and_reads_stay_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let db = ArchiveDb::create(dir.path(), small_format(), &DbOptions::default()).unwrap();
    let mut gen = KeyGen::new(13, 8, false);

    for height in 0..50 {
        let batch = UpdateBatch::assemble(gen.block(10, 0.1));
        db.apply_block(&batch, height).unwrap();
    }
    db.checkpoint().unwrap();

    // Verify the no-chaining invariant directly on the records.
    let store = db.store();
    let layout = store.layout().clone();
    for info in layout.all_tags() {
        if !info.shape.is_delta() {
            continue;
        }
        // Scan all allocated records of this delta tag.
        let (total, _, _) = {
            let row = store
                .tag_stats()
                .into_iter()
                .find(|r| r.0 == info.tag)
                .unwrap();
            (row.2, row.3, row.4)
        };
        for index in 0..total {
            let id = verkledb::nodes::NodeId::new(info.tag, index);
            let Ok(bytes) = verkledb::storage::NodeStore::read_record(&**store, id) else {
                continue; // freed slot
            };
            let node = verkledb::nodes::decode_node(info.tag, &bytes, &layout).unwrap();
            let verkledb::nodes::Node::Delta(delta) = node else {
                panic!("non-delta in delta file")
            };
            assert!(
                !layout.info(delta.base.tag()).unwrap().shape.is_delta(),
                "delta references a delta"
            );
        }
    }

    // Historical reads load at most two records per node: probe with a cold
    // cache and count loads against path length.
    let cold = ArchiveDb::open(dir.path(), &DbOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let key = TreeKey::from_stem_suffix(gen.stems[rng.gen_range(0..gen.stems.len())], 0);
        let height = rng.gen_range(0..50);
        let before = cold.trie().core().manager.counters().loads;
        let _ = cold.lookup_at(&key, height).unwrap();
        let after = cold.trie().core().manager.counters().loads;
        // A lookup touches at most 32 path nodes; two loads per node.
        assert!(after - before <= 64, "excessive loads: {}", after - before);
    }
}

#[test]
fn empty_batch_leaves_root_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let db = LiveDb::create(dir.path(), small_format(), &DbOptions::default()).unwrap();
    let mut gen = KeyGen::new(19, 6, false);
    let batch = UpdateBatch::assemble(gen.block(10, 0.0));
    let root = db.apply_block(&batch).unwrap();
    let root2 = db.apply_block(&UpdateBatch::default()).unwrap();
    assert_eq!(root, root2);
}

#[test]
fn deleting_everything_returns_to_the_empty_root() {
    let dir = tempfile::tempdir().unwrap();
    let db = LiveDb::create(dir.path(), small_format(), &DbOptions::default()).unwrap();
    let mut gen = KeyGen::new(23, 10, true);

    let muts = gen.block(40, 0.0);
    let batch = UpdateBatch::assemble(muts.clone());
    db.apply_block(&batch).unwrap();

    let deletes: Vec<(TreeKey, Option<[u8; 32]>)> =
        muts.iter().map(|(k, _)| (*k, None)).collect();
    let root = db.apply_block(&UpdateBatch::assemble(deletes)).unwrap();
    assert_eq!(root, [0u8; 32]);
    assert!(db.trie().root().is_null());
}

#[test]
fn guard_span_never_exceeds_three_levels() {
    let dir = tempfile::tempdir().unwrap();
    let db = LiveDb::create(dir.path(), small_format(), &DbOptions::default()).unwrap();
    let mut gen = KeyGen::new(29, 40, true);
    for _ in 0..20 {
        let batch = UpdateBatch::assemble(gen.block(30, 0.25));
        db.apply_block(&batch).unwrap();
    }
    let span = db.trie().core().tracker.max_span();
    assert!(span >= 1, "tracker saw no guards");
    assert!(span <= 3, "exclusive guards spanned {span} levels");
}
