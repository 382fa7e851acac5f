//! Undo journal protecting the last published checkpoint.
//!
//! Live-mode updates overwrite records in place, so between checkpoints a
//! data-file write can land on a record the published manifest still
//! references. Before the first such overwrite in a checkpoint interval,
//! the record's pre-image is appended to the journal and synced; recovery
//! after a crash (or an aborted checkpoint) replays the pre-images on top
//! of the data files, restoring exactly the state the manifest describes.
//!
//! The journal carries the generation of the manifest it protects. A
//! successful checkpoint bumps the generation and resets the journal, which
//! also makes any stale journal from before the publish self-invalidating.
//!
//! Entry layout after the header: `[id u64 le][len u32 le][bytes]`,
//! repeated. A torn tail entry is discarded on recovery; the matching data
//! overwrite cannot have happened, because the journal is synced before the
//! data write is issued.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::nodes::NodeId;

const JOURNAL_NAME: &str = "undo.journal";
const MAGIC: &[u8; 8] = b"vkdbjnl1";

struct State {
    file: Option<File>,
    journaled: HashSet<u64>,
    generation: u64,
}

pub struct UndoJournal {
    path: PathBuf,
    state: Mutex<State>,
}

impl UndoJournal {
    pub fn new(dir: &Path, generation: u64) -> UndoJournal {
        UndoJournal {
            path: dir.join(JOURNAL_NAME),
            state: Mutex::new(State {
                file: None,
                journaled: HashSet::new(),
                generation,
            }),
        }
    }

    /// Records the pre-image of `id` unless already journaled this
    /// interval. Returns only after the entry is durable.
    pub fn ensure_preimage(&self, id: NodeId, bytes: &[u8]) -> Result<()> {
        let mut state = self.state.lock();
        if !state.journaled.insert(id.to_u64()) {
            return Ok(());
        }
        if state.file.is_none() {
            let mut file = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&self.path)
                .map_err(|e| Error::io("creating undo journal", e))?;
            file.write_all(MAGIC)
                .and_then(|_| file.write_all(&state.generation.to_le_bytes()))
                .map_err(|e| Error::io("writing journal header", e))?;
            state.file = Some(file);
        }
        let generation = state.generation;
        let file = state.file.as_mut().expect("journal file open");
        let _ = generation;
        file.write_all(&id.to_u64().to_le_bytes())
            .and_then(|_| file.write_all(&(bytes.len() as u32).to_le_bytes()))
            .and_then(|_| file.write_all(bytes))
            .and_then(|_| file.sync_data())
            .map_err(|e| Error::io("appending journal pre-image", e))?;
        Ok(())
    }

    /// Starts a new interval after a successful checkpoint publish.
    pub fn reset(&self, new_generation: u64) -> Result<()> {
        let mut state = self.state.lock();
        state.file = None;
        state.journaled.clear();
        state.generation = new_generation;
        if self.path.exists() {
            std::fs::remove_file(&self.path).map_err(|e| Error::io("removing journal", e))?;
        }
        Ok(())
    }

    /// Reads the journal left by a previous process, if it protects the
    /// given manifest generation. Returns the pre-images to apply, oldest
    /// first (applying in order is safe: only the first entry per id
    /// exists).
    pub fn recover(dir: &Path, manifest_generation: u64) -> Result<Vec<(NodeId, Vec<u8>)>> {
        let path = dir.join(JOURNAL_NAME);
        let Ok(mut file) = File::open(&path) else {
            return Ok(Vec::new());
        };
        let mut header = [0u8; 16];
        if file.read_exact(&mut header).is_err() || &header[..8] != MAGIC {
            return Ok(Vec::new());
        }
        let generation = u64::from_le_bytes(header[8..].try_into().unwrap());
        if generation != manifest_generation {
            // Journal from a different interval than the published manifest
            // (left over after a successful publish); it protects nothing.
            return Ok(Vec::new());
        }
        let mut entries = Vec::new();
        loop {
            let mut head = [0u8; 12];
            match file.read_exact(&mut head) {
                Ok(()) => {}
                Err(_) => break, // clean EOF or torn tail
            }
            let id = NodeId::from_u64(u64::from_le_bytes(head[..8].try_into().unwrap()));
            let len = u32::from_le_bytes(head[8..].try_into().unwrap()) as usize;
            let mut bytes = vec![0u8; len];
            if file.read_exact(&mut bytes).is_err() {
                break; // torn tail entry; its data overwrite never happened
            }
            entries.push((id, bytes));
        }
        Ok(entries)
    }
}
