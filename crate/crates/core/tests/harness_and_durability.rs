//! End-to-end harness checks: verification oracles, replay determinism,
//! fault injection, durability across reopen, and checkpoint abort safety.

use verkledb::db::{ArchiveDb, DbOptions, LiveDb};
use verkledb::error::Error;
use verkledb::harness::{self, ReplayMode, ReplayOptions, WorkloadMode, WorkloadSpec};
use verkledb::nodes::{decode_node, Node, NodeId};
use verkledb::storage::{CheckpointPhase, FormatConfig, NodeStore};
use verkledb::trie::UpdateBatch;

fn small_spec(seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        seed,
        mode: WorkloadMode::Raw,
        population: 300,
        churn_blocks: 15,
        updates_per_block: 60,
        delete_ratio: 0.1,
        fill_per_block: 120,
    }
}

#[test]
fn stock_workload_verifies() {
    let workload = harness::generate(&small_spec(42));
    let report =
        harness::verify(&workload, &FormatConfig::default(), &DbOptions::default()).unwrap();
    assert!(report.passed, "verification failed: {:?}", report.failure);
    assert_eq!(report.blocks, workload.blocks.len() as u64);
}

#[test]
fn empty_workload_verifies() {
    let workload = harness::Workload {
        seed: 0,
        mode: WorkloadMode::Raw,
        blocks: Vec::new(),
    };
    let report =
        harness::verify(&workload, &FormatConfig::default(), &DbOptions::default()).unwrap();
    assert!(report.passed);
}

#[test]
fn account_workload_verifies() {
    let workload = harness::generate(&WorkloadSpec {
        mode: WorkloadMode::Account,
        population: 150,
        churn_blocks: 8,
        updates_per_block: 40,
        ..small_spec(7)
    });
    let report =
        harness::verify(&workload, &FormatConfig::default(), &DbOptions::default()).unwrap();
    assert!(report.passed, "verification failed: {:?}", report.failure);
}

#[test]
fn live_and_archive_replays_agree_per_block() {
    let workload = harness::generate(&small_spec(3));
    let live_dir = tempfile::tempdir().unwrap();
    let archive_dir = tempfile::tempdir().unwrap();

    let mut options = ReplayOptions {
        log_roots: true,
        ..Default::default()
    };
    let live = harness::replay(&workload, live_dir.path(), &options).unwrap();
    options.mode = ReplayMode::Archive;
    let archive = harness::replay(&workload, archive_dir.path(), &options).unwrap();
    assert_eq!(live.roots, archive.roots);
    assert_eq!(live.final_root, archive.final_root);
}

#[test]
fn replays_are_byte_reproducible() {
    let workload = harness::generate(&small_spec(9));
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let options = ReplayOptions {
        log_roots: true,
        ..Default::default()
    };
    let a = harness::replay(&workload, dir_a.path(), &options).unwrap();
    let b = harness::replay(&workload, dir_b.path(), &options).unwrap();
    assert_eq!(a.roots, b.roots);

    // Every file in the database directory is byte-identical, the manifest
    // included (it carries no timestamps).
    let mut names: Vec<String> = std::fs::read_dir(dir_a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let bytes_a = std::fs::read(dir_a.path().join(&name)).unwrap();
        let bytes_b = std::fs::read(dir_b.path().join(&name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "file {name} differs between replays");
    }
}

#[test]
fn stats_histograms_feed_the_optimizer() {
    use verkledb::specialization::{monotone_envelope, remap, solve, Histogram};
    let workload = harness::generate(&small_spec(5));
    let dir = tempfile::tempdir().unwrap();
    let report = harness::replay(&workload, dir.path(), &ReplayOptions::default()).unwrap();

    let stats = &report.stats;
    assert!(stats.leaf_occupancy.iter().sum::<u64>() > 0);
    // Per-tag file bytes reconcile with the data files on disk.
    for (tag, _, _, _, bytes) in &stats.tags {
        let path = dir.path().join(format!("nodes-{tag}.dat"));
        let on_disk = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        assert!(
            on_disk <= *bytes,
            "tag {tag}: file larger than logical bytes"
        );
    }
    assert_eq!(stats.total_nodes - stats.reusable_nodes, stats.used_nodes());

    // The measured histogram solves into a valid plan.
    let f = Histogram::new(stats.leaf_occupancy.clone()).unwrap();
    let s = verkledb::nodes::NodeLayout::space_function(verkledb::nodes::NodeKind::Leaf);
    let env = monotone_envelope(&s);
    let plan = solve(6, &env, &f).unwrap();
    let plan = remap(&plan, &s).unwrap();
    plan.validate().unwrap();
    assert_eq!(*plan.capacities().last().unwrap(), 256);
}

#[test]
fn fault_injected_value_flip_is_detected() {
    let workload = harness::generate(&small_spec(11));
    let dir = tempfile::tempdir().unwrap();
    harness::replay(&workload, dir.path(), &ReplayOptions::default()).unwrap();

    // Rebuild the expected map from the workload.
    let engine =
        verkledb::commitment::CommitmentEngine::new(&FormatConfig::default().seed).unwrap();
    let accounts = verkledb::trie::AccountOps::new(engine);
    let mut map = std::collections::BTreeMap::new();
    for ops in &workload.blocks {
        for (key, value) in harness::block_mutations(ops, &accounts).unwrap() {
            match value {
                Some(v) => {
                    map.insert(key, v);
                }
                None => {
                    map.remove(&key);
                }
            }
        }
    }

    // Flip one byte inside a stored leaf value by writing straight into the
    // data file, below every layer of the stack (simulated media fault).
    let corrupted_key = {
        let db = LiveDb::open(dir.path(), &DbOptions::default()).unwrap();
        let store = db.store();
        let layout = store.layout().clone();
        let mut flipped = None;
        'outer: for info in layout.all_tags() {
            if !matches!(info.shape, verkledb::nodes::TagShape::LeafSparse { .. }) {
                continue;
            }
            let Some(row) = store.tag_stats().into_iter().find(|r| r.0 == info.tag) else {
                continue;
            };
            for index in 0..row.2 {
                let id = NodeId::new(info.tag, index);
                let Ok(bytes) = NodeStore::read_record(&**store, id) else {
                    continue;
                };
                let Ok(Node::Leaf(leaf)) = decode_node(info.tag, &bytes, &layout) else {
                    continue;
                };
                let Some((suffix, _)) = leaf.iter_values().next() else {
                    continue;
                };
                // First entry's value starts after stem(31) + count(1) +
                // slot(1) within the record.
                let offset = index * info.record_size as u64 + 33;
                flipped = Some((
                    verkledb::trie::TreeKey::from_stem_suffix(leaf.stem, suffix),
                    dir.path().join(format!("nodes-{}.dat", info.tag)),
                    offset,
                    bytes[33] ^ 0xff,
                ));
                break 'outer;
            }
        }
        drop(db);
        let (key, path, offset, byte) = flipped.expect("found a leaf record to corrupt");
        use std::os::unix::fs::FileExt;
        let file = std::fs::OpenOptions::new().write(true).open(path).unwrap();
        file.write_all_at(&[byte], offset).unwrap();
        key
    };

    // A cold reopen now diverges from the map exactly at the flipped key.
    let db = LiveDb::open(dir.path(), &DbOptions::default()).unwrap();
    let mut divergent = Vec::new();
    for (key, value) in &map {
        if db.lookup(key).unwrap() != Some(*value) {
            divergent.push(*key);
        }
    }
    assert_eq!(divergent, vec![corrupted_key]);
}

#[test]
fn checkpoint_survives_process_kill() {
    let workload = harness::generate(&small_spec(13));
    let dir = tempfile::tempdir().unwrap();
    let expected_root = {
        let report = harness::replay(&workload, dir.path(), &ReplayOptions::default()).unwrap();
        report.final_root
        // The database is dropped here without any further shutdown write,
        // as a killed process would leave it.
    };

    let db = LiveDb::open(dir.path(), &DbOptions::default()).unwrap();
    let (_, root, stored_commitment) = db.store().last_checkpoint();
    assert_eq!(stored_commitment, expected_root);
    assert_eq!(db.trie().root(), root);
    // Recompute the root over the reopened state: bit-for-bit equal.
    assert_eq!(db.root_commitment().unwrap(), expected_root);
}

#[test]
fn archive_checkpoint_survives_reopen_with_history() {
    let workload = harness::generate(&small_spec(17));
    let dir = tempfile::tempdir().unwrap();
    let options = ReplayOptions {
        mode: ReplayMode::Archive,
        log_roots: true,
        ..Default::default()
    };
    let report = harness::replay(&workload, dir.path(), &options).unwrap();

    let db = ArchiveDb::open(dir.path(), &DbOptions::default()).unwrap();
    assert_eq!(db.blocks(), report.blocks);
    for (height, root) in report.roots.iter().enumerate() {
        assert_eq!(&db.trie().commitment_at(height as u64).unwrap(), root);
    }
}

#[test]
fn aborted_checkpoint_preserves_the_previous_one() {
    let dir = tempfile::tempdir().unwrap();
    let db = LiveDb::create(dir.path(), FormatConfig::default(), &DbOptions::default()).unwrap();

    let key = verkledb::trie::TreeKey::from_stem_suffix([1; 31], 0);
    let batch = UpdateBatch::assemble(vec![(key, Some([1; 32]))]);
    db.apply_block(&batch).unwrap();
    db.checkpoint().unwrap();
    let checkpointed = db.store().last_checkpoint();

    let batch2 = UpdateBatch::assemble(vec![(key, Some([2; 32]))]);
    db.apply_block(&batch2).unwrap();
    let abort = |phase: CheckpointPhase| {
        if phase == CheckpointPhase::BeforePublish {
            Err(Error::invalid("injected abort"))
        } else {
            Ok(())
        }
    };
    assert!(db.checkpoint_with_hook(&abort).is_err());
    drop(db);

    // The reopened database restores the prior checkpoint.
    let db = LiveDb::open(dir.path(), &DbOptions::default()).unwrap();
    assert_eq!(db.store().last_checkpoint(), checkpointed);
    assert_eq!(db.lookup(&key).unwrap(), Some([1; 32]));
}

#[test]
fn flush_buffer_and_page_cache_replays_match_plain_replay() {
    let workload = harness::generate(&small_spec(19));
    let plain_dir = tempfile::tempdir().unwrap();
    let tuned_dir = tempfile::tempdir().unwrap();

    let plain = harness::replay(
        &workload,
        plain_dir.path(),
        &ReplayOptions {
            log_roots: true,
            ..Default::default()
        },
    )
    .unwrap();
    let tuned = harness::replay(
        &workload,
        tuned_dir.path(),
        &ReplayOptions {
            log_roots: true,
            db: DbOptions {
                cache_capacity: 256,
                flush_buffer: Some((128, 2)),
                page_cache_pages: Some(64),
                parallel_threshold: 4,
            },
            checkpoint_interval: 5,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(plain.roots, tuned.roots);

    // The tuned database reopens to the same state.
    let db = LiveDb::open(tuned_dir.path(), &DbOptions::default()).unwrap();
    assert_eq!(db.root_commitment().unwrap(), plain.final_root);
}
