//! Write-behind flush buffer.
//!
//! Wraps a record store and absorbs writes into a bounded in-memory map
//! drained by background workers, taking storage writes off the caller's
//! critical path. Reads are served from the buffer first, so read-your-
//! writes holds regardless of drain timing. Frees wait for any in-flight
//! write of the same id before reaching the underlying store, which keeps a
//! reused slot from being clobbered by a stale drain.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};

use crate::error::{Error, Result};
use crate::nodes::NodeId;
use crate::storage::NodeStore;

struct BufferState {
    pending: HashMap<NodeId, Vec<u8>>,
    queue: VecDeque<NodeId>,
    in_flight: HashMap<NodeId, Vec<u8>>,
    shutdown: bool,
    failure: Option<String>,
}

struct Shared {
    state: Mutex<BufferState>,
    work: Condvar,
    space: Condvar,
    idle: Condvar,
    capacity: usize,
    inner: Arc<dyn NodeStore>,
}

pub struct FlushBuffer {
    shared: Arc<Shared>,
    workers: Mutex<Vec<std::thread::JoinHandle<()>>>,
}

impl FlushBuffer {
    pub fn new(inner: Arc<dyn NodeStore>, capacity: usize, workers: usize) -> Arc<FlushBuffer> {
        assert!(capacity > 0 && workers > 0);
        let shared = Arc::new(Shared {
            state: Mutex::new(BufferState {
                pending: HashMap::new(),
                queue: VecDeque::new(),
                in_flight: HashMap::new(),
                shutdown: false,
                failure: None,
            }),
            work: Condvar::new(),
            space: Condvar::new(),
            idle: Condvar::new(),
            capacity,
            inner,
        });
        let buffer = Arc::new(FlushBuffer {
            shared: shared.clone(),
            workers: Mutex::new(Vec::new()),
        });
        let mut handles = buffer.workers.lock();
        for i in 0..workers {
            let shared = shared.clone();
            handles.push(
                std::thread::Builder::new()
                    .name(format!("flush-worker-{i}"))
                    .spawn(move || drain_loop(&shared))
                    .expect("spawning flush worker"),
            );
        }
        drop(handles);
        buffer
    }

    /// Blocks until every buffered write has reached the underlying store.
    pub fn drain(&self) -> Result<()> {
        let mut state = self.shared.state.lock();
        while !state.pending.is_empty() || !state.in_flight.is_empty() {
            self.shared.idle.wait(&mut state);
        }
        if let Some(msg) = state.failure.take() {
            return Err(Error::Corruption(format!("background flush failed: {msg}")));
        }
        Ok(())
    }

    pub fn pending_len(&self) -> usize {
        let state = self.shared.state.lock();
        state.pending.len() + state.in_flight.len()
    }
}

impl NodeStore for FlushBuffer {
    fn allocate(&self, tag: u8) -> Result<NodeId> {
        self.shared.inner.allocate(tag)
    }

    fn write_record(&self, id: NodeId, record: &[u8]) -> Result<()> {
        let mut state = self.shared.state.lock();
        if let Some(msg) = state.failure.take() {
            return Err(Error::Corruption(format!("background flush failed: {msg}")));
        }
        // Overwriting an already-pending id does not grow the buffer, so it
        // never needs to wait for space.
        while !state.pending.contains_key(&id) && state.pending.len() >= self.shared.capacity {
            self.shared.space.wait(&mut state);
        }
        if state.pending.insert(id, record.to_vec()).is_none() {
            state.queue.push_back(id);
        }
        drop(state);
        self.shared.work.notify_one();
        Ok(())
    }

    fn read_record(&self, id: NodeId) -> Result<Vec<u8>> {
        {
            let state = self.shared.state.lock();
            if let Some(bytes) = state.pending.get(&id).or_else(|| state.in_flight.get(&id)) {
                return Ok(bytes.clone());
            }
        }
        self.shared.inner.read_record(id)
    }

    fn free_record(&self, id: NodeId) -> Result<()> {
        let mut state = self.shared.state.lock();
        // A buffered-but-unwritten record is simply dropped; the queue entry
        // becomes stale and is skipped by the workers.
        state.pending.remove(&id);
        while state.in_flight.contains_key(&id) {
            self.shared.idle.wait(&mut state);
        }
        drop(state);
        self.shared.inner.free_record(id)
    }

    fn flush(&self) -> Result<()> {
        self.drain()?;
        self.shared.inner.flush()
    }
}

impl Drop for FlushBuffer {
    fn drop(&mut self) {
        {
            let mut state = self.shared.state.lock();
            state.shutdown = true;
        }
        self.shared.work.notify_all();
        for handle in self.workers.lock().drain(..) {
            let _ = handle.join();
        }
    }
}

fn drain_loop(shared: &Shared) {
    loop {
        let (id, bytes) = {
            let mut state = shared.state.lock();
            loop {
                if state.shutdown && state.queue.is_empty() {
                    return;
                }
                // Find the first queued id that is still pending and not
                // being written by another worker; stale entries (freed or
                // rewritten ids) are dropped.
                let mut picked = None;
                let mut rotations = 0;
                while rotations < state.queue.len() {
                    let Some(id) = state.queue.pop_front() else { break };
                    if state.in_flight.contains_key(&id) {
                        state.queue.push_back(id);
                        rotations += 1;
                        continue;
                    }
                    if let Some(bytes) = state.pending.remove(&id) {
                        picked = Some((id, bytes));
                    }
                    break;
                }
                match picked {
                    Some((id, bytes)) => {
                        state.in_flight.insert(id, bytes.clone());
                        break (id, bytes);
                    }
                    None => {
                        if state.shutdown && state.queue.is_empty() {
                            return;
                        }
                        shared.work.wait(&mut state);
                    }
                }
            }
        };

        let result = shared.inner.write_record(id, &bytes);
        let mut state = shared.state.lock();
        state.in_flight.remove(&id);
        if let Err(e) = result {
            state.failure = Some(e.to_string());
        }
        drop(state);
        shared.space.notify_all();
        shared.idle.notify_all();
    }
}
