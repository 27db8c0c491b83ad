//! Hybrid-log storage engine.
//!
//! A fixed-size latch-free hash index points into a single logical address
//! space. The newest pages live in memory and are updated in place; older
//! in-memory pages are immutable and updated by read-copy-update; the oldest
//! pages are flushed to segment files. Every read and write runs the
//! bounded-staleness protocol from [`crate::lockword`] on the record header.

mod address;
mod epoch;
mod index;
pub mod layout;
mod log;
pub mod manifest;
mod segment;
mod stats;

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, TryLockError};
use std::path::{Path, PathBuf};
use std::sync::atomic::{fence, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

pub use address::{LogicalAddress, RegionBounds, ADDRESS_MASK};
pub use manifest::CheckpointManifest;
pub use segment::{checksum, segment_file_name};
pub use stats::{histogram_bucket, StoreStats, HISTOGRAM_BUCKETS};

use crate::error::{Error, Result};
use crate::lockword::{
    self, try_acquire_plain, try_acquire_read, try_acquire_write, AcquireOutcome, Backoff, LockWord,
    StalenessBound, REPLACED_BIT,
};
use crate::prefetch::IoPool;
use crate::tables::{TableEntry, TableMeta};
use epoch::EpochTable;
pub(crate) use epoch::Guard;
use index::HashIndex;
use layout::{record_size, MAX_DIM};
use log::{Bounds, Log, LOG_START};
use segment::{RecordImage, SegmentStore};
pub(crate) use stats::bump;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub data_dir: PathBuf,
    pub memory_budget_bytes: u64,
    /// Share of the in-memory log that accepts in-place updates.
    pub mutable_fraction: f64,
    /// Size of one log page and of one segment file (power of two).
    pub segment_size_bytes: u64,
    pub index_buckets: u64,
    /// When false, reads and writes take the record lock but skip the
    /// staleness gate and counter (the plain hybrid-log baseline).
    pub staleness_enabled: bool,
    /// Emulated device latency added to every get/put/lookahead segment read.
    pub io_latency: Duration,
    /// Number of lookahead I/O contexts.
    pub io_contexts: usize,
    /// Lookahead submission queue capacity; a full queue blocks the submitter.
    pub io_queue_depth: usize,
    /// Record (key, pre-CAS staleness, bound) for every acquired read.
    pub trace_reads: bool,
}

impl StoreConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        StoreConfig {
            data_dir: data_dir.into(),
            memory_budget_bytes: 64 << 20,
            mutable_fraction: 0.9,
            segment_size_bytes: 1 << 20,
            index_buckets: 1 << 20,
            staleness_enabled: true,
            io_latency: Duration::ZERO,
            io_contexts: 16,
            io_queue_depth: 4096,
            trace_reads: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !self.index_buckets.is_power_of_two() {
            return err(format!("index_buckets {} is not a power of two", self.index_buckets));
        }
        if !self.segment_size_bytes.is_power_of_two()
            || self.segment_size_bytes < record_size(MAX_DIM).next_power_of_two()
            || self.segment_size_bytes > 1 << 32
        {
            return err(format!(
                "segment_size_bytes {} must be a power of two in [{}, 2^32]",
                self.segment_size_bytes,
                record_size(MAX_DIM).next_power_of_two()
            ));
        }
        if self.memory_budget_bytes < 2 * self.segment_size_bytes {
            return err("memory budget must hold at least two segments".into());
        }
        if !(self.mutable_fraction > 0.0 && self.mutable_fraction < 1.0) {
            return err(format!("mutable_fraction {} not in (0, 1)", self.mutable_fraction));
        }
        if self.io_contexts == 0 || self.io_queue_depth == 0 {
            return err("io_contexts and io_queue_depth must be positive".into());
        }
        Ok(())
    }
}

/// Where a key's current version lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Mutable,
    Immutable,
    /// In memory, but its page is being written to a segment.
    Flushing,
    OnDisk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Inserted,
    Updated,
    /// `insert_if_absent` found an existing version.
    Existed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadTrace {
    pub key: u64,
    pub pre_staleness: u16,
    pub bound: StalenessBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ReadKind {
    Sync,
    Prefetch,
    Maintenance,
}

pub(crate) enum Located {
    Memory { addr: u64, region: Region },
    Image(RecordImage),
}

pub(crate) struct Lookup {
    pub bucket: usize,
    pub entry: u64,
    pub found: Option<Located>,
}

pub(crate) enum MemLocate {
    Hit,
    Absent,
    OnDisk,
}

/// Log slot allocated ahead of taking a record lock, reused across retries.
#[derive(Default)]
pub(crate) struct Spare(Option<(u64, u64)>);

impl Spare {
    fn take_valid(&mut self, size: u64, closing: u64) -> Option<u64> {
        match self.0.take() {
            Some((a, s)) if s == size && a >= closing => Some(a),
            _ => None,
        }
    }

    fn is_valid(&self, size: u64, closing: u64) -> bool {
        matches!(self.0, Some((a, s)) if s == size && a >= closing)
    }
}

#[derive(Clone, Copy)]
enum ReadMode {
    Gated(StalenessBound),
    /// Counted read that bypasses the gate (repeat of a key within one batch).
    Reader,
}

enum WriteOp<'a> {
    Put(&'a [f32]),
    InsertIfAbsent(&'a [f32]),
    Add(&'a [f32]),
    Cancel,
}

pub(crate) struct Inner {
    pub(crate) uid: u64,
    dir: PathBuf,
    staleness_enabled: bool,
    trace_reads: bool,
    pub(crate) log: Log,
    index: HashIndex,
    pub(crate) epoch: Arc<EpochTable>,
    segments: SegmentStore,
    flush_lock: Mutex<()>,
    pub(crate) tables: Mutex<BTreeMap<u16, TableEntry>>,
    manifest_id: AtomicU64,
    recovered_below: u64,
    flushed_pages: AtomicU64,
    traces: Box<[Mutex<Vec<ReadTrace>>]>,
    _dir_lock: File,
}

/// Shared handle to an open store. Cloning is cheap; all clones refer to the
/// same engine, which shuts down when the last clone is dropped.
#[derive(Clone)]
pub struct Store {
    pub(crate) io: Arc<IoPool>,
    pub(crate) inner: Arc<Inner>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("dir", &self.inner.dir)
            .field("bounds", &self.bounds())
            .finish()
    }
}

fn lock_dir(dir: &Path) -> Result<File> {
    let f = fs::OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(dir.join("LOCK"))?;
    match f.try_lock() {
        Ok(()) => Ok(f),
        Err(TryLockError::WouldBlock) => Err(Error::LockHeld(dir.to_path_buf())),
        Err(TryLockError::Error(e)) => Err(e.into()),
    }
}

impl Store {
    /// Opens `config.data_dir`, recovering from the newest manifest if present.
    /// A recovered store keeps the page size and bucket count of its manifest.
    pub fn open(config: StoreConfig) -> Result<Store> {
        fs::create_dir_all(&config.data_dir)?;
        let lock = lock_dir(&config.data_dir)?;
        match manifest::latest(&config.data_dir)? {
            Some((_, m)) => Self::from_manifest(config, lock, m),
            None => {
                config.validate()?;
                Ok(Self::build(config, lock, None, LOG_START, 0))
            }
        }
    }

    /// Opens the store described by a specific manifest file.
    pub fn recover(config: StoreConfig, manifest_path: &Path) -> Result<Store> {
        fs::create_dir_all(&config.data_dir)?;
        let lock = lock_dir(&config.data_dir)?;
        let m = manifest::read(manifest_path)?;
        Self::from_manifest(config, lock, m)
    }

    fn from_manifest(mut config: StoreConfig, lock: File, m: CheckpointManifest) -> Result<Store> {
        let dir = config.data_dir.clone();
        let mpath = dir.join(CheckpointManifest::file_name(m.manifest_id));
        config.segment_size_bytes = m.page_size;
        config.index_buckets = m.index_buckets;
        if config.memory_budget_bytes < 2 * m.page_size {
            config.memory_budget_bytes = 2 * m.page_size;
        }
        config.validate()?;
        let probe = SegmentStore::new(&dir, m.page_size, Duration::ZERO);
        for n in m.segment_numbers(&mpath)? {
            probe.verify(n)?;
        }
        let index = HashIndex::read_snapshot(&dir.join(&m.index_snapshot_file), m.index_buckets)?;
        let flushed = m.flushed_tail.0;
        let start = if flushed <= LOG_START {
            LOG_START
        } else {
            flushed.div_ceil(m.page_size) * m.page_size
        };
        let store = Self::build(config, lock, Some(index), start, flushed);
        store.inner.manifest_id.store(m.manifest_id, Ordering::SeqCst);
        let mut tables = store.inner.tables.lock();
        for meta in m.table_metas {
            tables.insert(meta.model_id, TableEntry::from_meta(meta));
        }
        drop(tables);
        Ok(store)
    }

    fn build(config: StoreConfig, lock: File, index: Option<HashIndex>, start: u64, recovered_below: u64) -> Store {
        let page = config.segment_size_bytes;
        let nframes = config.memory_budget_bytes / page;
        let epoch = EpochTable::new();
        let inner = Arc::new(Inner {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            dir: config.data_dir.clone(),
            staleness_enabled: config.staleness_enabled,
            trace_reads: config.trace_reads,
            log: Log::new(page, nframes, config.mutable_fraction, start),
            index: index.unwrap_or_else(|| HashIndex::new(config.index_buckets)),
            epoch,
            segments: SegmentStore::new(&config.data_dir, page, config.io_latency),
            flush_lock: Mutex::new(()),
            tables: Mutex::new(BTreeMap::new()),
            manifest_id: AtomicU64::new(0),
            recovered_below,
            flushed_pages: AtomicU64::new(0),
            traces: (0..epoch::MAX_SESSIONS).map(|_| Mutex::new(Vec::new())).collect(),
            _dir_lock: lock,
        });
        let io = Arc::new(IoPool::start(inner.clone(), config.io_contexts, config.io_queue_depth));
        Store { io, inner }
    }

    pub fn data_dir(&self) -> &Path {
        &self.inner.dir
    }

    pub fn staleness_enabled(&self) -> bool {
        self.inner.staleness_enabled
    }

    pub fn bounds(&self) -> RegionBounds {
        let l = &self.inner.log;
        RegionBounds {
            head: LogicalAddress(l.head.load(Ordering::SeqCst)),
            read_only: LogicalAddress(l.read_only.load(Ordering::SeqCst)),
            tail: LogicalAddress(l.tail.load(Ordering::SeqCst)),
        }
    }

    pub fn page_size(&self) -> u64 {
        self.inner.log.page_size
    }

    pub fn stats(&self) -> StoreStats {
        let mut s = StoreStats::default();
        for slot in self.inner.epoch.slots() {
            s.add_slot(&slot.stats);
        }
        s.flushed_pages = self.inner.flushed_pages.load(Ordering::Relaxed);
        s
    }

    /// Drains and returns the read trace (empty unless `trace_reads` is set).
    pub fn take_read_trace(&self) -> Vec<ReadTrace> {
        let mut out = Vec::new();
        for t in self.inner.traces.iter() {
            out.append(&mut t.lock());
        }
        out
    }

    /// Gated read: waits until the record's staleness is within `bound`,
    /// then counts one outstanding read and returns the payload.
    pub fn get(&self, key: u64, bound: StalenessBound) -> Result<Vec<f32>> {
        self.inner.read_counted(key, ReadMode::Gated(bound))?.ok_or(Error::NotFound)
    }

    /// Counts one more outstanding read without consulting any bound.
    pub fn add_reader(&self, key: u64) -> Result<Vec<f32>> {
        self.inner.read_counted(key, ReadMode::Reader)?.ok_or(Error::NotFound)
    }

    /// Reads the current value without touching the staleness counter.
    pub fn peek(&self, key: u64) -> Result<Option<Vec<f32>>> {
        self.inner.peek(key)
    }

    pub fn put(&self, key: u64, payload: &[f32]) -> Result<WriteOutcome> {
        check_dim(payload.len())?;
        self.inner.write(key, WriteOp::Put(payload))
    }

    /// Inserts `payload` with a zero staleness counter unless the key exists.
    pub fn insert_if_absent(&self, key: u64, payload: &[f32]) -> Result<WriteOutcome> {
        check_dim(payload.len())?;
        self.inner.write(key, WriteOp::InsertIfAbsent(payload))
    }

    /// Gated read that first inserts `init()` when the key is absent.
    pub fn get_or_insert_with(
        &self,
        key: u64,
        bound: StalenessBound,
        init: impl FnOnce() -> Vec<f32>,
    ) -> Result<(Vec<f32>, bool)> {
        if let Some(v) = self.inner.read_counted(key, ReadMode::Gated(bound))? {
            return Ok((v, false));
        }
        let v = init();
        check_dim(v.len())?;
        let inserted = self.inner.write(key, WriteOp::InsertIfAbsent(&v))? == WriteOutcome::Inserted;
        let got = self.get(key, bound)?;
        Ok((got, inserted))
    }

    /// `value += delta` under a single lock acquisition; pairs with one read.
    pub fn rmw(&self, key: u64, delta: &[f32]) -> Result<()> {
        check_dim(delta.len())?;
        self.inner.write(key, WriteOp::Add(delta)).map(|_| ())
    }

    /// Retracts one outstanding read that will never be followed by a write.
    pub fn cancel_read(&self, key: u64) -> Result<()> {
        self.inner.write(key, WriteOp::Cancel).map(|_| ())
    }

    /// Current staleness counter of a key's newest version.
    pub fn staleness_of(&self, key: u64) -> Result<Option<u16>> {
        let inner = &self.inner;
        let g = inner.epoch.protect()?;
        let b = inner.log.bounds();
        let lk = inner.find(&g, key, &b, ReadKind::Maintenance)?;
        Ok(lk.found.map(|f| match f {
            Located::Memory { addr, .. } => LockWord(inner.log.header(addr).load(Ordering::Acquire)).staleness(),
            Located::Image(img) => img.header.staleness(),
        }))
    }

    pub fn region_of(&self, key: u64) -> Result<Option<Region>> {
        let inner = &self.inner;
        let g = inner.epoch.protect()?;
        let b = inner.log.bounds();
        let lk = inner.find(&g, key, &b, ReadKind::Maintenance)?;
        Ok(lk.found.map(|f| match f {
            Located::Memory { region, .. } => region,
            Located::Image(img) if img.addr >= b.head => Region::Flushing,
            Located::Image(_) => Region::OnDisk,
        }))
    }

    /// Logical address of a key's newest version.
    pub fn address_of(&self, key: u64) -> Result<Option<LogicalAddress>> {
        let inner = &self.inner;
        let g = inner.epoch.protect()?;
        let b = inner.log.bounds();
        let lk = inner.find(&g, key, &b, ReadKind::Maintenance)?;
        Ok(lk.found.map(|f| match f {
            Located::Memory { addr, .. } => LogicalAddress(addr),
            Located::Image(img) => LogicalAddress(img.addr),
        }))
    }

    pub fn is_empty(&self) -> bool {
        self.inner.index.is_empty()
    }

    /// Advances the read-only boundary per the mutable fraction and flushes
    /// head pages when the in-memory log exceeds its budget.
    pub fn migrate_regions(&self) -> Result<()> {
        let log = &self.inner.log;
        let tail_page = log.page_of(log.tail.load(Ordering::SeqCst));
        self.inner.shift_read_only(tail_page);
        if tail_page + 1 >= log.page_of(log.reclaimed.load(Ordering::SeqCst)) + log.nframes {
            self.inner.make_room(tail_page + 1)?;
        }
        Ok(())
    }

    /// Flushes every complete page so that all existing records become
    /// disk-resident. The tail moves to the next page boundary.
    pub fn evict_all(&self) -> Result<()> {
        let inner = &self.inner;
        let _f = inner.flush_lock.lock();
        let log = &inner.log;
        let target = loop {
            let t = log.tail.load(Ordering::SeqCst);
            let next = t.div_ceil(log.page_size) * log.page_size;
            if next == t || log.tail.compare_exchange(t, next, Ordering::SeqCst, Ordering::SeqCst).is_ok() {
                break next;
            }
        };
        inner.evict_to(target)
    }

    /// Stop-the-world checkpoint into the data directory.
    pub fn checkpoint(&self) -> Result<CheckpointManifest> {
        self.inner.checkpoint()
    }

    /// Every live key with its current value, sorted by key.
    pub fn scan(&self) -> Result<Vec<(u64, Vec<f32>)>> {
        self.inner.scan()
    }

    /// CRC-64 over the sorted (key, dim, payload) contents of the store.
    pub fn digest(&self) -> Result<u64> {
        let mut bytes = Vec::new();
        for (k, v) in self.scan()? {
            bytes.extend_from_slice(&k.to_le_bytes());
            bytes.extend_from_slice(&(v.len() as u64).to_le_bytes());
            for x in v {
                bytes.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        Ok(checksum(&bytes))
    }

    pub(crate) fn uid(&self) -> u64 {
        self.inner.uid
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::DimMismatch {
            expected: MAX_DIM,
            actual: dim,
        });
    }
    Ok(())
}

fn dim_mismatch(expected: usize, actual: usize) -> Error {
    Error::DimMismatch { expected, actual }
}

impl Inner {
    fn read_disk(&self, g: &Guard, addr: u64, kind: ReadKind) -> Result<RecordImage> {
        let s = g.stats();
        match kind {
            ReadKind::Sync => bump(&s.disk_reads),
            ReadKind::Prefetch => bump(&s.prefetch_reads),
            ReadKind::Maintenance => bump(&s.maintenance_reads),
        }
        let mut img = self.segments.read_record(addr, kind != ReadKind::Maintenance)?;
        self.normalize(&mut img);
        Ok(img)
    }

    fn normalize(&self, img: &mut RecordImage) {
        if img.addr < self.recovered_below {
            // No reads are outstanding across a restart.
            img.header = LockWord(img.header.0 & (lockword::GENERATION_MASK << lockword::GENERATION_SHIFT));
        } else {
            img.header = img.header.persisted();
        }
    }

    fn image_from_memory(&self, addr: u64) -> RecordImage {
        let log = &self.log;
        let dim = log.dim_at(addr);
        RecordImage {
            addr,
            header: LockWord(log.header(addr).load(Ordering::Acquire)).persisted(),
            prev: log.prev_at(addr),
            key: log.key_at(addr),
            payload: log.read_payload(addr, dim),
        }
    }

    /// Resolves the newest version of `key`. Disk-resident versions are read
    /// synchronously; versions on closing pages are copied out.
    pub(crate) fn find(&self, g: &Guard, key: u64, b: &Bounds, kind: ReadKind) -> Result<Lookup> {
        let bucket = self.index.bucket_of(key);
        let entry = self.index.load(bucket);
        let mut a = entry;
        while a != 0 {
            if a >= b.head {
                if self.log.key_at(a) == key {
                    let found = if a >= b.read_only {
                        Located::Memory { addr: a, region: Region::Mutable }
                    } else if a >= b.closing {
                        Located::Memory { addr: a, region: Region::Immutable }
                    } else {
                        Located::Image(self.image_from_memory(a))
                    };
                    return Ok(Lookup { bucket, entry, found: Some(found) });
                }
                a = self.log.prev_at(a);
            } else {
                let img = self.read_disk(g, a, kind)?;
                if img.key == key {
                    return Ok(Lookup { bucket, entry, found: Some(Located::Image(img)) });
                }
                a = img.prev;
            }
        }
        Ok(Lookup { bucket, entry, found: None })
    }

    /// Memory-only resolution used to decide whether a lookahead needs I/O.
    pub(crate) fn locate_in_memory(&self, key: u64) -> MemLocate {
        let head = self.log.head.load(Ordering::SeqCst);
        let mut a = self.index.load(self.index.bucket_of(key));
        while a != 0 {
            if a < head {
                return MemLocate::OnDisk;
            }
            if self.log.key_at(a) == key {
                return MemLocate::Hit;
            }
            a = self.log.prev_at(a);
        }
        MemLocate::Absent
    }

    /// Whether `addr` is still the first version of `key` reachable from its
    /// bucket. Returns the bucket and entry observed when it is.
    pub(crate) fn validate_front(&self, g: &Guard, key: u64, addr: u64) -> Result<Option<(usize, u64)>> {
        let b = self.log.bounds();
        let bucket = self.index.bucket_of(key);
        let entry = self.index.load(bucket);
        let mut a = entry;
        while a != 0 {
            if a == addr {
                return Ok(Some((bucket, entry)));
            }
            if a >= b.head {
                if self.log.key_at(a) == key {
                    return Ok(None);
                }
                a = self.log.prev_at(a);
            } else {
                let img = self.read_disk(g, a, ReadKind::Prefetch)?;
                if img.key == key {
                    return Ok(None);
                }
                a = img.prev;
            }
        }
        Ok(None)
    }

    /// Writes a new version at the tail and publishes it with a CAS on the
    /// bucket. Returns false when the caller must re-resolve.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn install_copy(
        &self,
        g: &mut Guard,
        key: u64,
        bucket: usize,
        entry: u64,
        staleness: u16,
        payload: &[f32],
        spare: &mut Spare,
    ) -> Result<bool> {
        let size = record_size(payload.len());
        let addr = match spare.take_valid(size, self.log.closing.load(Ordering::SeqCst)) {
            Some(a) => a,
            None => {
                let (a, interrupted) = self.allocate(g, size)?;
                if interrupted {
                    spare.0 = Some((a, size));
                    return Ok(false);
                }
                a
            }
        };
        self.log.write_record(addr, LockWord(staleness as u64), entry, key, payload);
        if self.index.cas(bucket, entry, addr).is_ok() {
            Ok(true)
        } else {
            spare.0 = Some((addr, size));
            Ok(false)
        }
    }

    /// Marks the in-memory copy of a superseded closing-page version, if any.
    pub(crate) fn mark_stub_replaced(&self, addr: u64) {
        if addr >= self.log.head.load(Ordering::SeqCst) {
            self.log.header(addr).fetch_or(REPLACED_BIT, Ordering::AcqRel);
        }
    }

    fn trace(&self, g: &Guard, key: u64, pre: u16, bound: StalenessBound) {
        let s = g.stats();
        bump(&s.reads_acquired);
        bump(&s.histogram[histogram_bucket(pre)]);
        if self.staleness_enabled && !bound.admits(pre) {
            bump(&s.audit_violations);
        }
        if self.trace_reads {
            self.traces[g.slot()].lock().push(ReadTrace {
                key,
                pre_staleness: pre,
                bound,
            });
        }
    }

    fn read_counted(&self, key: u64, mode: ReadMode) -> Result<Option<Vec<f32>>> {
        let mut g = self.epoch.protect()?;
        let mut backoff = Backoff::new();
        let mut spare = Spare::default();
        let (mut gate_waited, mut lock_waited) = (false, false);
        let bound = match mode {
            ReadMode::Gated(b) => b,
            ReadMode::Reader => StalenessBound::INFINITY,
        };
        loop {
            let b = self.log.bounds();
            let lk = self.find(&g, key, &b, ReadKind::Sync)?;
            let addr = match lk.found {
                None => return Ok(None),
                Some(Located::Image(img)) => {
                    let s = img.header.staleness();
                    if self.install_copy(&mut g, key, lk.bucket, lk.entry, s, &img.payload, &mut spare)? {
                        bump(&g.stats().promotions);
                        self.mark_stub_replaced(img.addr);
                    }
                    continue;
                }
                Some(Located::Memory { addr, .. }) => addr,
            };
            let hdr = self.log.header(addr);
            let cur = LockWord(hdr.load(Ordering::Acquire));
            let outcome = if self.staleness_enabled {
                try_acquire_read(cur, bound)?
            } else {
                try_acquire_plain(cur)
            };
            match outcome {
                AcquireOutcome::Acquired(new) => {
                    if hdr
                        .compare_exchange(cur.0, new.0, Ordering::AcqRel, Ordering::Relaxed)
                        .is_err()
                    {
                        continue;
                    }
                    let v = self.log.read_payload(addr, self.log.dim_at(addr));
                    hdr.store(lockword::release(new)?.0, Ordering::Release);
                    self.trace(&g, key, cur.staleness(), bound);
                    if gate_waited {
                        bump(&g.stats().gate_waits);
                    }
                    if lock_waited {
                        bump(&g.stats().lock_waits);
                    }
                    return Ok(Some(v));
                }
                AcquireOutcome::RetryAddressChanged => continue,
                AcquireOutcome::WaitStaleness(_) => {
                    gate_waited = true;
                    g.unprotect();
                    backoff.snooze();
                    g.reprotect();
                }
                AcquireOutcome::WaitLocked => {
                    lock_waited = true;
                    g.unprotect();
                    backoff.snooze();
                    g.reprotect();
                }
            }
        }
    }

    /// Optimistic read validated by the generation counter.
    pub(crate) fn peek(&self, key: u64) -> Result<Option<Vec<f32>>> {
        let g = self.epoch.protect()?;
        let mut backoff = Backoff::new();
        loop {
            let b = self.log.bounds();
            let lk = self.find(&g, key, &b, ReadKind::Maintenance)?;
            match lk.found {
                None => return Ok(None),
                Some(Located::Image(img)) => return Ok(Some(img.payload)),
                Some(Located::Memory { addr, .. }) => {
                    if let Some(v) = self.read_consistent(addr) {
                        return Ok(Some(v));
                    }
                    backoff.snooze();
                }
            }
        }
    }

    pub(crate) fn read_consistent(&self, addr: u64) -> Option<Vec<f32>> {
        let hdr = self.log.header(addr);
        let before = LockWord(hdr.load(Ordering::Acquire));
        if before.locked() || before.replaced() {
            return None;
        }
        let v = self.log.read_payload(addr, self.log.dim_at(addr));
        fence(Ordering::Acquire);
        let after = LockWord(hdr.load(Ordering::Relaxed));
        (!after.locked() && after.generation() == before.generation()).then_some(v)
    }

    fn write_staleness(&self, s: u16) -> u16 {
        if self.staleness_enabled {
            s.saturating_sub(1)
        } else {
            s
        }
    }

    fn write(&self, key: u64, op: WriteOp<'_>) -> Result<WriteOutcome> {
        let mut g = self.epoch.protect()?;
        let mut backoff = Backoff::new();
        let mut spare = Spare::default();
        let mut lock_waited = false;
        loop {
            let b = self.log.bounds();
            let lk = self.find(&g, key, &b, ReadKind::Sync)?;
            match lk.found {
                None => match op {
                    WriteOp::Put(v) | WriteOp::InsertIfAbsent(v) => {
                        if self.install_copy(&mut g, key, lk.bucket, lk.entry, 0, v, &mut spare)? {
                            bump(&g.stats().inserts);
                            return Ok(WriteOutcome::Inserted);
                        }
                    }
                    WriteOp::Add(_) | WriteOp::Cancel => return Err(Error::NotFound),
                },
                Some(Located::Image(img)) => {
                    let s = img.header.staleness();
                    let dim = img.payload.len();
                    let (new_s, payload) = match op {
                        WriteOp::InsertIfAbsent(_) => return Ok(WriteOutcome::Existed),
                        WriteOp::Put(v) => {
                            if v.len() != dim {
                                return Err(dim_mismatch(dim, v.len()));
                            }
                            (self.write_staleness(s), v.to_vec())
                        }
                        WriteOp::Add(d) => {
                            if d.len() != dim {
                                return Err(dim_mismatch(dim, d.len()));
                            }
                            let sum = img.payload.iter().zip(d).map(|(a, x)| a + x).collect();
                            (self.write_staleness(s), sum)
                        }
                        WriteOp::Cancel if !self.staleness_enabled => return Ok(WriteOutcome::Updated),
                        WriteOp::Cancel => (lockword::cancel_read(img.header)?.staleness(), img.payload.clone()),
                    };
                    if self.install_copy(&mut g, key, lk.bucket, lk.entry, new_s, &payload, &mut spare)? {
                        bump(&g.stats().rcu_updates);
                        self.mark_stub_replaced(img.addr);
                        return Ok(WriteOutcome::Updated);
                    }
                }
                Some(Located::Memory { addr, region }) => {
                    let dim = self.log.dim_at(addr);
                    match op {
                        WriteOp::InsertIfAbsent(_) => return Ok(WriteOutcome::Existed),
                        WriteOp::Put(v) | WriteOp::Add(v) if v.len() != dim => {
                            return Err(dim_mismatch(dim, v.len()))
                        }
                        _ => {}
                    }
                    let hdr = self.log.header(addr);
                    let cur = LockWord(hdr.load(Ordering::Acquire));
                    if let WriteOp::Cancel = op {
                        if !self.staleness_enabled {
                            return Ok(WriteOutcome::Updated);
                        }
                        if cur.replaced() {
                            continue;
                        }
                        if !cur.locked() {
                            let next = lockword::cancel_read(cur)?;
                            if hdr
                                .compare_exchange(cur.0, next.0, Ordering::AcqRel, Ordering::Relaxed)
                                .is_ok()
                            {
                                return Ok(WriteOutcome::Updated);
                            }
                            continue;
                        }
                        lock_waited = true;
                        g.unprotect();
                        backoff.snooze();
                        g.reprotect();
                        continue;
                    }
                    let outcome = if self.staleness_enabled {
                        try_acquire_write(cur)
                    } else {
                        try_acquire_plain(cur)
                    };
                    let new = match outcome {
                        AcquireOutcome::Acquired(new) => new,
                        AcquireOutcome::RetryAddressChanged => continue,
                        AcquireOutcome::WaitLocked | AcquireOutcome::WaitStaleness(_) => {
                            lock_waited = true;
                            g.unprotect();
                            backoff.snooze();
                            g.reprotect();
                            continue;
                        }
                    };
                    if region == Region::Mutable {
                        if hdr
                            .compare_exchange(cur.0, new.0, Ordering::AcqRel, Ordering::Relaxed)
                            .is_err()
                        {
                            continue;
                        }
                        match op {
                            WriteOp::Put(v) => self.log.write_payload(addr, v),
                            WriteOp::Add(d) => self.log.add_payload(addr, d),
                            _ => unreachable!(),
                        }
                        hdr.store(lockword::release(new)?.0, Ordering::Release);
                        bump(&g.stats().inplace_updates);
                    } else {
                        let size = record_size(dim);
                        if !spare.is_valid(size, self.log.closing.load(Ordering::SeqCst)) {
                            let (a, interrupted) = self.allocate(&mut g, size)?;
                            spare.0 = Some((a, size));
                            if interrupted {
                                continue;
                            }
                        }
                        if hdr
                            .compare_exchange(cur.0, new.0, Ordering::AcqRel, Ordering::Relaxed)
                            .is_err()
                        {
                            continue;
                        }
                        let payload = match op {
                            WriteOp::Put(v) => v.to_vec(),
                            WriteOp::Add(d) => {
                                let old = self.log.read_payload(addr, dim);
                                old.iter().zip(d).map(|(a, x)| a + x).collect()
                            }
                            _ => unreachable!(),
                        };
                        let (slot, _) = spare.0.take().expect("spare checked above");
                        let mut entry = lk.entry;
                        self.log
                            .write_record(slot, LockWord(new.staleness() as u64), entry, key, &payload);
                        // The held lock keeps every other version of this key
                        // from being installed, so only unrelated keys can race.
                        while let Err(current) = self.index.cas(lk.bucket, entry, slot) {
                            entry = current;
                            self.log.set_prev(slot, entry);
                        }
                        let done = lockword::mark_replaced(lockword::release(new)?);
                        hdr.store(done.0, Ordering::Release);
                        bump(&g.stats().rcu_updates);
                    }
                    if lock_waited {
                        bump(&g.stats().lock_waits);
                    }
                    return Ok(WriteOutcome::Updated);
                }
            }
        }
    }

    /// Reserves `size` bytes at the tail. May drop the guard's protection to
    /// flush pages; the flag reports whether that happened.
    fn allocate(&self, g: &mut Guard, size: u64) -> Result<(u64, bool)> {
        let log = &self.log;
        let mut interrupted = false;
        loop {
            let t = log.tail.load(Ordering::SeqCst);
            let page = log.page_of(t);
            let (start, end) = if (t & (log.page_size - 1)) + size <= log.page_size {
                (t, t + size)
            } else {
                let next = log.page_start(page + 1);
                (next, next + size)
            };
            let start_page = log.page_of(start);
            let reclaimed_page = log.page_of(log.reclaimed.load(Ordering::SeqCst));
            if start_page >= reclaimed_page + log.nframes {
                g.unprotect();
                let r = self.make_room(start_page);
                g.reprotect();
                r?;
                interrupted = true;
                continue;
            }
            if log
                .tail
                .compare_exchange(t, end, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                if start_page != page || start == log.page_start(page) {
                    self.shift_read_only(start_page);
                }
                return Ok((start, interrupted));
            }
        }
    }

    fn shift_read_only(&self, tail_page: u64) {
        let log = &self.log;
        let ro_page = (tail_page + 1).saturating_sub(log.mutable_pages);
        let target = log.page_start(ro_page);
        if target > log.read_only.load(Ordering::SeqCst) {
            log.read_only.fetch_max(target, Ordering::SeqCst);
        }
    }

    /// Frees frames so that `need_page` can be allocated. Caller is unprotected.
    fn make_room(&self, need_page: u64) -> Result<()> {
        let _f = self.flush_lock.lock();
        let log = &self.log;
        let reclaimed_page = log.page_of(log.reclaimed.load(Ordering::SeqCst));
        if need_page < reclaimed_page + log.nframes {
            return Ok(());
        }
        let reserve = if log.nframes >= 8 { (log.nframes / 8).max(1) } else { 0 };
        let tail_page = log.page_of(log.tail.load(Ordering::SeqCst));
        let target_page = (need_page + 1 + reserve).saturating_sub(log.nframes).min(tail_page);
        self.evict_to(log.page_start(target_page))
    }

    /// Flushes pages below `new_head` and releases their frames. Caller holds
    /// the flush lock and is unprotected.
    fn evict_to(&self, new_head: u64) -> Result<()> {
        let log = &self.log;
        let head = log.head.load(Ordering::SeqCst);
        if new_head <= head {
            return Ok(());
        }
        log.read_only.fetch_max(new_head, Ordering::SeqCst);
        log.closing.fetch_max(new_head, Ordering::SeqCst);
        // Everything that could still lock a record on the closing pages
        // started before this point.
        self.epoch.bump_and_drain();
        let (first, last) = (log.page_of(head), log.page_of(new_head));
        for page in first..last {
            self.segments.write_page(page, &log.page_bytes(page))?;
            self.flushed_pages.fetch_add(1, Ordering::Relaxed);
        }
        log.head.store(new_head, Ordering::SeqCst);
        self.epoch.bump_and_drain();
        for page in first..last {
            log.zero_page(page);
        }
        log.reclaimed.store(new_head, Ordering::SeqCst);
        Ok(())
    }

    fn checkpoint(&self) -> Result<CheckpointManifest> {
        let _q = self.epoch.quiesce();
        let _f = self.flush_lock.lock();
        let log = &self.log;
        let tail = log.tail.load(Ordering::SeqCst);
        let head = log.head.load(Ordering::SeqCst);
        if tail > head {
            for page in log.page_of(head)..=log.page_of(tail - 1) {
                self.segments.write_page(page, &log.page_bytes(page))?;
            }
        }
        self.segments.sync_all()?;
        // Records below the checkpoint tail must not change in place anymore.
        log.read_only.fetch_max(tail, Ordering::SeqCst);

        let id = self.manifest_id.fetch_add(1, Ordering::SeqCst) + 1;
        let index_file = format!("index.{id}");
        self.index.write_snapshot(&self.dir.join(&index_file))?;
        let segment_files = if tail > LOG_START {
            (0..=log.page_of(tail - 1)).map(segment_file_name).collect()
        } else {
            Vec::new()
        };
        let table_metas: Vec<TableMeta> = self.tables.lock().values().map(TableEntry::meta).collect();
        let m = CheckpointManifest {
            format_version: manifest::FORMAT_VERSION,
            manifest_id: id,
            flushed_tail: LogicalAddress(tail),
            page_size: log.page_size,
            index_buckets: self.index.len() as u64,
            index_snapshot_file: index_file,
            segment_files,
            table_metas,
        };
        manifest::write(&self.dir, &m)?;
        self.remove_stale_checkpoints(id)?;
        Ok(m)
    }

    fn remove_stale_checkpoints(&self, current: u64) -> Result<()> {
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            let id = name
                .strip_prefix("MANIFEST.")
                .or_else(|| name.strip_prefix("index."))
                .and_then(|s| s.parse::<u64>().ok());
            if matches!(id, Some(id) if id < current) {
                fs::remove_file(entry.path())?;
            }
        }
        Ok(())
    }

    fn scan(&self) -> Result<Vec<(u64, Vec<f32>)>> {
        let g = self.epoch.protect()?;
        let mut out = Vec::new();
        let mut backoff = Backoff::new();
        for bucket in 0..self.index.len() {
            'walk: loop {
                let mut seen = HashSet::new();
                let mut found = Vec::new();
                let mut a = self.index.load(bucket);
                while a != 0 {
                    if a < self.log.head.load(Ordering::SeqCst) {
                        let img = self.read_disk(&g, a, ReadKind::Maintenance)?;
                        if seen.insert(img.key) {
                            found.push((img.key, img.payload));
                        }
                        a = img.prev;
                        continue;
                    }
                    let key = self.log.key_at(a);
                    if !seen.contains(&key) {
                        match self.read_consistent(a) {
                            Some(v) => {
                                seen.insert(key);
                                found.push((key, v));
                            }
                            // Superseded after the bucket was read: restart.
                            None if LockWord(self.log.header(a).load(Ordering::Acquire)).replaced() => {
                                continue 'walk
                            }
                            None => {
                                backoff.snooze();
                                continue;
                            }
                        }
                    }
                    a = self.log.prev_at(a);
                }
                out.extend(found);
                break;
            }
        }
        out.sort_unstable_by_key(|(k, _)| *k);
        Ok(out)
    }
}
