//! The file layer: positional reads and writes against raw files, plus an
//! optional page-cache proxy.

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

use crate::error::{Error, Result};

/// Cursor-independent file access. Implementations must allow concurrent
/// calls; accesses to overlapping regions are serialized internally so
/// records are never torn.
pub trait FileIo: Send + Sync {
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<()>;
    fn write_at(&self, offset: u64, data: &[u8]) -> Result<()>;
    /// Durability point: everything written so far reaches the device.
    fn sync(&self) -> Result<()>;
}

const STRIPE_SIZE: u64 = 4096;
const STRIPE_COUNT: usize = 64;

/// Direct positional file access via `pread`/`pwrite`. Concurrent accesses
/// to non-overlapping regions proceed in parallel; overlapping regions are
/// serialized by striped region locks, acquired in ascending order.
pub struct PositionalFile {
    file: File,
    stripes: Vec<Mutex<()>>,
}

impl PositionalFile {
    pub fn open(path: &Path) -> Result<PositionalFile> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(PositionalFile {
            file,
            stripes: (0..STRIPE_COUNT).map(|_| Mutex::new(())).collect(),
        })
    }

    fn lock_range(&self, offset: u64, len: usize) -> Vec<parking_lot::MutexGuard<'_, ()>> {
        if len == 0 {
            return Vec::new();
        }
        let first = offset / STRIPE_SIZE;
        let last = (offset + len as u64 - 1) / STRIPE_SIZE;
        let mut stripes: Vec<usize> = (first..=last)
            .map(|s| (s % STRIPE_COUNT as u64) as usize)
            .collect();
        stripes.sort_unstable();
        stripes.dedup();
        stripes.into_iter().map(|s| self.stripes[s].lock()).collect()
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> Result<u64> {
        Ok(self
            .file
            .metadata()
            .map_err(|e| Error::io("file metadata", e))?
            .len())
    }
}

impl FileIo for PositionalFile {
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        let _guards = self.lock_range(offset, buf.len());
        read_exact_or_zero(&self.file, offset, buf)
    }

    fn write_at(&self, offset: u64, data: &[u8]) -> Result<()> {
        let _guards = self.lock_range(offset, data.len());
        self.file
            .write_all_at(data, offset)
            .map_err(|e| Error::io(format!("write at offset {offset}"), e))
    }

    fn sync(&self) -> Result<()> {
        self.file
            .sync_data()
            .map_err(|e| Error::io("fsync", e))
    }
}

/// Reads into `buf`, zero-filling any region past end-of-file (sparse files
/// and never-written trailing records read as zeros either way).
fn read_exact_or_zero(file: &File, offset: u64, buf: &mut [u8]) -> Result<()> {
    let mut read = 0usize;
    while read < buf.len() {
        match file.read_at(&mut buf[read..], offset + read as u64) {
            Ok(0) => {
                buf[read..].fill(0);
                return Ok(());
            }
            Ok(n) => read += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::io(format!("read at offset {offset}"), e)),
        }
    }
    Ok(())
}

pub const PAGE_SIZE: usize = 4096;

/// Hit/miss statistics of a [`PagedFile`].
#[derive(Debug, Default)]
pub struct PageCacheStats {
    pub hits: AtomicU64,
    pub misses: AtomicU64,
    pub underlying_reads: AtomicU64,
    pub underlying_writes: AtomicU64,
}

struct Page {
    data: Box<[u8; PAGE_SIZE]>,
    dirty: bool,
    last_use: u64,
}

struct PageMap {
    pages: std::collections::HashMap<u64, Page>,
    tick: u64,
}

/// A write-back page cache in front of another file. Requests served from a
/// resident page perform no underlying file operations; a dirty page is
/// written back before eviction. All accesses are serialized by one lock.
pub struct PagedFile<F: FileIo> {
    inner: F,
    capacity: usize,
    map: Mutex<PageMap>,
    stats: PageCacheStats,
}

impl<F: FileIo> PagedFile<F> {
    pub fn new(inner: F, capacity_pages: usize) -> PagedFile<F> {
        assert!(capacity_pages > 0);
        PagedFile {
            inner,
            capacity: capacity_pages,
            map: Mutex::new(PageMap {
                pages: std::collections::HashMap::new(),
                tick: 0,
            }),
            stats: PageCacheStats::default(),
        }
    }

    pub fn stats(&self) -> &PageCacheStats {
        &self.stats
    }

    fn with_page<R>(
        &self,
        map: &mut PageMap,
        page_no: u64,
        f: impl FnOnce(&mut Page) -> R,
    ) -> Result<R> {
        map.tick += 1;
        let tick = map.tick;
        if let Some(page) = map.pages.get_mut(&page_no) {
            self.stats.hits.fetch_add(1, Ordering::Relaxed);
            page.last_use = tick;
            return Ok(f(page));
        }
        self.stats.misses.fetch_add(1, Ordering::Relaxed);

        if map.pages.len() >= self.capacity {
            let victim = *map
                .pages
                .iter()
                .min_by_key(|(_, p)| p.last_use)
                .map(|(no, _)| no)
                .expect("cache non-empty");
            let page = map.pages.remove(&victim).unwrap();
            if page.dirty {
                self.stats.underlying_writes.fetch_add(1, Ordering::Relaxed);
                self.inner
                    .write_at(victim * PAGE_SIZE as u64, page.data.as_ref())?;
            }
        }

        let mut data = Box::new([0u8; PAGE_SIZE]);
        self.stats.underlying_reads.fetch_add(1, Ordering::Relaxed);
        self.inner.read_at(page_no * PAGE_SIZE as u64, data.as_mut())?;
        let page = map.pages.entry(page_no).or_insert(Page {
            data,
            dirty: false,
            last_use: tick,
        });
        Ok(f(page))
    }
}

impl<F: FileIo> FileIo for PagedFile<F> {
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        let mut map = self.map.lock();
        let mut done = 0usize;
        while done < buf.len() {
            let pos = offset + done as u64;
            let page_no = pos / PAGE_SIZE as u64;
            let in_page = (pos % PAGE_SIZE as u64) as usize;
            let n = (PAGE_SIZE - in_page).min(buf.len() - done);
            self.with_page(&mut map, page_no, |page| {
                buf[done..done + n].copy_from_slice(&page.data[in_page..in_page + n]);
            })?;
            done += n;
        }
        Ok(())
    }

    fn write_at(&self, offset: u64, data: &[u8]) -> Result<()> {
        let mut map = self.map.lock();
        let mut done = 0usize;
        while done < data.len() {
            let pos = offset + done as u64;
            let page_no = pos / PAGE_SIZE as u64;
            let in_page = (pos % PAGE_SIZE as u64) as usize;
            let n = (PAGE_SIZE - in_page).min(data.len() - done);
            self.with_page(&mut map, page_no, |page| {
                page.data[in_page..in_page + n].copy_from_slice(&data[done..done + n]);
                page.dirty = true;
            })?;
            done += n;
        }
        Ok(())
    }

    fn sync(&self) -> Result<()> {
        let mut map = self.map.lock();
        let mut dirty: Vec<u64> = map
            .pages
            .iter()
            .filter(|(_, p)| p.dirty)
            .map(|(no, _)| *no)
            .collect();
        dirty.sort_unstable();
        for no in dirty {
            let page = map.pages.get_mut(&no).unwrap();
            self.stats.underlying_writes.fetch_add(1, Ordering::Relaxed);
            self.inner.write_at(no * PAGE_SIZE as u64, page.data.as_ref())?;
            page.dirty = false;
        }
        self.inner.sync()
    }
}
