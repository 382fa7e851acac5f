//! Fixed-size record storage for one specialization tag.

use std::collections::{BTreeSet, HashSet};

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::nodes::NodeId;
use crate::storage::file::FileIo;

struct AllocState {
    next_index: u64,
    free: BTreeSet<u64>,
    /// Allocated this session but not yet written; reads are not-found.
    unwritten: HashSet<u64>,
}

/// One file per node tag; all records share the tag's size, so a record's
/// offset is `index * record_size`. Freed indices are reused
/// smallest-first.
pub struct NodeFileStore {
    tag: u8,
    record_size: usize,
    file: Box<dyn FileIo>,
    state: Mutex<AllocState>,
}

impl NodeFileStore {
    pub fn new(
        tag: u8,
        record_size: usize,
        file: Box<dyn FileIo>,
        next_index: u64,
        free: impl IntoIterator<Item = u64>,
    ) -> NodeFileStore {
        NodeFileStore {
            tag,
            record_size,
            file,
            state: Mutex::new(AllocState {
                next_index,
                free: free.into_iter().collect(),
                unwritten: HashSet::new(),
            }),
        }
    }

    pub fn tag(&self) -> u8 {
        self.tag
    }

    pub fn record_size(&self) -> usize {
        self.record_size
    }

    pub fn allocate(&self) -> Result<NodeId> {
        let mut state = self.state.lock();
        let index = match state.free.pop_first() {
            Some(i) => i,
            None => {
                let i = state.next_index;
                if i > NodeId::MAX_INDEX {
                    return Err(Error::invalid(format!("tag {} index space exhausted", self.tag)));
                }
                state.next_index += 1;
                i
            }
        };
        state.unwritten.insert(index);
        Ok(NodeId::new(self.tag, index))
    }

    pub fn write(&self, id: NodeId, record: &[u8]) -> Result<()> {
        if record.len() != self.record_size {
            return Err(Error::invalid(format!(
                "record of {} bytes for tag {} with record size {}",
                record.len(),
                self.tag,
                self.record_size
            )));
        }
        let index = id.index();
        {
            let mut state = self.state.lock();
            if index >= state.next_index || state.free.contains(&index) {
                return Err(Error::invalid(format!(
                    "write to unallocated id {id:?}"
                )));
            }
            state.unwritten.remove(&index);
        }
        self.file.write_at(index * self.record_size as u64, record)
    }

    pub fn read(&self, id: NodeId) -> Result<Vec<u8>> {
        let index = id.index();
        {
            let state = self.state.lock();
            if index >= state.next_index
                || state.free.contains(&index)
                || state.unwritten.contains(&index)
            {
                return Err(Error::NotFound);
            }
        }
        let mut buf = vec![0u8; self.record_size];
        self.file.read_at(index * self.record_size as u64, &mut buf)?;
        Ok(buf)
    }

    pub fn free(&self, id: NodeId) -> Result<()> {
        let index = id.index();
        let mut state = self.state.lock();
        if index >= state.next_index || state.free.contains(&index) {
            return Err(Error::invalid(format!(
                "free of unallocated id {id:?}"
            )));
        }
        state.unwritten.remove(&index);
        state.free.insert(index);
        Ok(())
    }

    pub fn sync(&self) -> Result<()> {
        self.file.sync()
    }

    /// Reads the raw record bytes at an index regardless of liveness; used
    /// for journaling pre-images.
    pub(crate) fn raw_read(&self, index: u64) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; self.record_size];
        self.file.read_at(index * self.record_size as u64, &mut buf)?;
        Ok(buf)
    }

    /// Writes raw record bytes at an index regardless of allocation state;
    /// used when undoing to a checkpoint.
    pub(crate) fn raw_write(&self, index: u64, bytes: &[u8]) -> Result<()> {
        self.file.write_at(index * self.record_size as u64, bytes)
    }

    /// (next_index, free list) snapshot for the manifest.
    pub fn alloc_snapshot(&self) -> (u64, Vec<u64>) {
        let state = self.state.lock();
        (state.next_index, state.free.iter().copied().collect())
    }

    /// Bytes the file logically occupies: records allocated so far times the
    /// record size, including free (reusable) slots.
    pub fn file_bytes(&self) -> u64 {
        self.state.lock().next_index * self.record_size as u64
    }

    /// (total allocated, reusable) record counts.
    pub fn slot_counts(&self) -> (u64, u64) {
        let state = self.state.lock();
        (state.next_index, state.free.len() as u64)
    }
}
