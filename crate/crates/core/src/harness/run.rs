//! Block replay, end-to-end verification, and database statistics.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::commitment::CommitmentEngine;
use crate::db::{ArchiveDb, DbOptions, LiveDb};
use crate::error::{Error, Result};
use crate::nodes::{DeltaView, Node, NodeId, WIDTH};
use crate::storage::FormatConfig;
use crate::trie::{AccountOps, ReferenceTrie, TreeKey, TrieCore, UpdateBatch};

use super::workload::{Op, Workload};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplayMode {
    Live,
    Archive,
}

#[derive(Clone, Debug)]
pub struct ReplayOptions {
    pub mode: ReplayMode,
    pub format: FormatConfig,
    pub db: DbOptions,
    /// Checkpoint every N blocks (0 = only at the end).
    pub checkpoint_interval: u64,
    /// Record the per-block root commitments in the report.
    pub log_roots: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            mode: ReplayMode::Live,
            format: FormatConfig::default(),
            db: DbOptions::default(),
            checkpoint_interval: 0,
            log_roots: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ReplayReport {
    pub blocks: u64,
    pub total_weight: u64,
    pub elapsed_secs: f64,
    pub weighted_ops_per_sec: f64,
    pub roots: Vec<[u8; 32]>,
    pub final_root: [u8; 32],
    pub stats: StatsReport,
}

/// Converts a workload block into trie mutations; account operations go
/// through the embedding.
pub fn block_mutations(
    ops: &[Op],
    accounts: &AccountOps,
) -> Result<Vec<(TreeKey, Option<[u8; 32]>)>> {
    let mut muts = Vec::with_capacity(ops.len());
    for op in ops {
        match op {
            Op::Set(key, value) => muts.push((*key, Some(*value))),
            Op::Del(key) => muts.push((*key, None)),
            Op::Balance(addr, amount) => {
                let (key, value) = accounts.set_balance(addr, *amount)?;
                muts.push((key, Some(value)));
            }
            Op::Nonce(addr, nonce) => {
                let (key, value) = accounts.set_nonce(addr, *nonce)?;
                muts.push((key, Some(value)));
            }
            Op::Slot(addr, slot, value) => {
                let (key, v) = accounts.set_storage_slot(addr, slot, *value)?;
                muts.push((key, Some(v)));
            }
            Op::Code(addr, code) => {
                for (key, value) in accounts.set_code(addr, code)? {
                    muts.push((key, Some(value)));
                }
            }
        }
    }
    Ok(muts)
}

/// Replays a workload into a fresh database directory.
pub fn replay(workload: &Workload, dir: &Path, options: &ReplayOptions) -> Result<ReplayReport> {
    enum Db {
        Live(LiveDb),
        Archive(ArchiveDb),
    }
    let db = match options.mode {
        ReplayMode::Live => Db::Live(LiveDb::create(dir, options.format.clone(), &options.db)?),
        ReplayMode::Archive => {
            Db::Archive(ArchiveDb::create(dir, options.format.clone(), &options.db)?)
        }
    };
    let engine = match &db {
        Db::Live(live) => CommitmentEngine::new(&live.store().format().seed)?,
        Db::Archive(archive) => CommitmentEngine::new(&archive.store().format().seed)?,
    };
    let accounts = AccountOps::new(engine);

    let started = Instant::now();
    let mut report = ReplayReport::default();
    let mut final_root = [0u8; 32];
    for (height, ops) in workload.blocks.iter().enumerate() {
        let batch = UpdateBatch::assemble(block_mutations(ops, &accounts)?);
        report.total_weight += ops.iter().map(Op::weight).sum::<u64>();
        let root = match &db {
            Db::Live(live) => live.apply_block(&batch)?,
            Db::Archive(archive) => archive.apply_block(&batch, height as u64)?.1,
        };
        if options.log_roots {
            report.roots.push(root);
        }
        final_root = root;
        if options.checkpoint_interval > 0 && (height as u64 + 1) % options.checkpoint_interval == 0
        {
            match &db {
                Db::Live(live) => live.checkpoint()?,
                Db::Archive(archive) => archive.checkpoint()?,
            }
        }
    }
    match &db {
        Db::Live(live) => live.checkpoint()?,
        Db::Archive(archive) => archive.checkpoint()?,
    }

    report.blocks = workload.blocks.len() as u64;
    report.elapsed_secs = started.elapsed().as_secs_f64();
    report.weighted_ops_per_sec = if report.elapsed_secs > 0.0 {
        report.total_weight as f64 / report.elapsed_secs
    } else {
        0.0
    };
    report.final_root = final_root;
    report.stats = match &db {
        Db::Live(live) => collect_stats(live.trie().core(), live.trie().root(), live.store())?,
        Db::Archive(archive) => collect_stats(
            archive.trie().core(),
            archive.trie().latest_root(),
            archive.store(),
        )?,
    };
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub passed: bool,
    pub blocks: u64,
    pub failure: Option<String>,
}

/// Runs the differential oracles end to end: live lookups against a plain
/// map, per-block roots against the naive reference trie, archive
/// time-travel against retained write history, and live/archive root
/// agreement.
pub fn verify(workload: &Workload, format: &FormatConfig, db: &DbOptions) -> Result<VerifyReport> {
    let live_dir = tempdir()?;
    let archive_dir = tempdir()?;
    let live = LiveDb::create(live_dir.path(), format.clone(), db)?;
    let archive = ArchiveDb::create(archive_dir.path(), format.clone(), db)?;
    let engine = CommitmentEngine::new(&format.seed)?;
    let accounts = AccountOps::new(engine.clone());
    let mut reference = ReferenceTrie::new(engine);

    let mut map: BTreeMap<TreeKey, [u8; 32]> = BTreeMap::new();
    let mut history: BTreeMap<TreeKey, Vec<(u64, Option<[u8; 32]>)>> = BTreeMap::new();

    let fail = |report: &mut VerifyReport, msg: String| {
        report.passed = false;
        report.failure = Some(msg);
    };
    let mut report = VerifyReport {
        passed: true,
        blocks: workload.blocks.len() as u64,
        failure: None,
    };

    for (height, ops) in workload.blocks.iter().enumerate() {
        let batch = UpdateBatch::assemble(block_mutations(ops, &accounts)?);
        for e in batch.entries() {
            match e.value {
                Some(v) => {
                    map.insert(e.key, v);
                }
                None => {
                    map.remove(&e.key);
                }
            }
            history.entry(e.key).or_default().push((height as u64, e.value));
        }

        let live_root = live.apply_block(&batch)?;
        let (_, archive_root) = archive.apply_block(&batch, height as u64)?;
        reference.apply_block(&batch);
        let reference_root = reference.root_commitment();

        if live_root != reference_root {
            fail(
                &mut report,
                format!("block {height}: live root diverges from full recomputation"),
            );
            return Ok(report);
        }
        if archive_root != live_root {
            fail(
                &mut report,
                format!("block {height}: archive root diverges from live root"),
            );
            return Ok(report);
        }
    }

    // Live lookups against the map oracle.
    for (key, value) in &map {
        let got = live.lookup(key)?;
        if got != Some(*value) {
            fail(
                &mut report,
                format!("live lookup mismatch for key {key:?}"),
            );
            return Ok(report);
        }
    }

    // Archive time travel against the retained history.
    let blocks = workload.blocks.len() as u64;
    for (key, writes) in &history {
        for probe in [0, blocks / 2, blocks.saturating_sub(1)] {
            let expected = writes
                .iter()
                .take_while(|(h, _)| *h <= probe)
                .last()
                .and_then(|(_, v)| *v);
            let got = archive.lookup_at(key, probe)?;
            if got != expected {
                fail(
                    &mut report,
                    format!("archive lookup mismatch for key {key:?} at height {probe}"),
                );
                return Ok(report);
            }
        }
    }
    Ok(report)
}

fn tempdir() -> Result<tempdir_shim::TempDir> {
    tempdir_shim::tempdir()
}

/// Minimal unique-temp-directory helper so the harness does not depend on a
/// dev-only crate.
mod tempdir_shim {
    use super::{Error, Result};
    use std::path::{Path, PathBuf};
    use std::sync::atomic::{AtomicU64, Ordering};

    static COUNTER: AtomicU64 = AtomicU64::new(0);

    pub struct TempDir {
        path: PathBuf,
    }

    impl TempDir {
        pub fn path(&self) -> &Path {
            &self.path
        }
    }

    impl Drop for TempDir {
        fn drop(&mut self) {
            let _ = std::fs::remove_dir_all(&self.path);
        }
    }

    pub fn tempdir() -> Result<TempDir> {
        let path = std::env::temp_dir().join(format!(
            "verkledb-verify-{}-{}",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&path).map_err(|e| Error::io("creating temp dir", e))?;
        Ok(TempDir { path })
    }
}

/// Occupancy histograms and size accounting of an open database.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsReport {
    /// `inner_occupancy[i]` counts inner nodes with exactly `i + 1` children
    /// (tip state).
    pub inner_occupancy: Vec<u64>,
    pub leaf_occupancy: Vec<u64>,
    /// Per tag: (tag, record size, total slots, reusable slots, file bytes).
    pub tags: Vec<(u8, usize, u64, u64, u64)>,
    pub total_file_bytes: u64,
    pub total_nodes: u64,
    pub reusable_nodes: u64,
    pub cache_loads: u64,
    pub storage_writes: u64,
}

impl StatsReport {
    pub fn used_nodes(&self) -> u64 {
        self.total_nodes - self.reusable_nodes
    }

    /// Share of leaves with occupancy at most `limit`.
    pub fn leaf_share_at_most(&self, limit: usize) -> f64 {
        share_at_most(&self.leaf_occupancy, limit)
    }

    pub fn inner_share_at_most(&self, limit: usize) -> f64 {
        share_at_most(&self.inner_occupancy, limit)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,occupancy,count\n");
        for (i, count) in self.inner_occupancy.iter().enumerate() {
            if *count > 0 {
                out.push_str(&format!("inner,{},{}\n", i + 1, count));
            }
        }
        for (i, count) in self.leaf_occupancy.iter().enumerate() {
            if *count > 0 {
                out.push_str(&format!("leaf,{},{}\n", i + 1, count));
            }
        }
        out
    }

    pub fn tag_csv(&self) -> String {
        let mut out = String::from("tag,record_size,total_slots,reusable_slots,file_bytes\n");
        for (tag, size, total, reusable, bytes) in &self.tags {
            out.push_str(&format!("{tag},{size},{total},{reusable},{bytes}\n"));
        }
        out
    }
}

fn share_at_most(histogram: &[u64], limit: usize) -> f64 {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let within: u64 = histogram.iter().take(limit).sum();
    within as f64 / total as f64
}

/// Walks the tip trie collecting occupancy histograms and joins them with
/// the storage-level accounting.
pub fn collect_stats(
    core: &TrieCore,
    root: NodeId,
    store: &Arc<crate::storage::FileStoreManager>,
) -> Result<StatsReport> {
    let mut report = StatsReport {
        inner_occupancy: vec![0; WIDTH],
        leaf_occupancy: vec![0; WIDTH],
        ..Default::default()
    };
    if !root.is_null() {
        walk(core, root, &mut report)?;
    }
    report.tags = store.tag_stats();
    report.total_file_bytes = store.total_file_bytes();
    for (_, _, total, reusable, _) in &report.tags {
        report.total_nodes += total;
        report.reusable_nodes += reusable;
    }
    report.cache_loads = core.manager.counters().loads;
    report.storage_writes = store.write_stats().total_writes();
    Ok(report)
}

fn walk(core: &TrieCore, id: NodeId, report: &mut StatsReport) -> Result<()> {
    let children: Vec<NodeId> = {
        let guard = core.manager.get_read(id)?;
        match &*guard {
            Node::Inner(inner) => {
                report.inner_occupancy[inner.occupied() as usize - 1] += 1;
                inner.iter_children().map(|(_, c)| c).collect()
            }
            Node::Leaf(leaf) => {
                report.leaf_occupancy[leaf.occupied() as usize - 1] += 1;
                Vec::new()
            }
            Node::Delta(delta) => match &delta.view {
                DeltaView::Inner(inner) => {
                    report.inner_occupancy[inner.occupied() as usize - 1] += 1;
                    inner.iter_children().map(|(_, c)| c).collect()
                }
                DeltaView::Leaf(leaf) => {
                    report.leaf_occupancy[leaf.occupied() as usize - 1] += 1;
                    Vec::new()
                }
            },
        }
    };
    for child in children {
        walk(core, child, report)?;
    }
    Ok(())
}
