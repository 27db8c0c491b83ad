//! Look-ahead prefetching.
//!
//! `lookahead` resolves each key against the in-memory log without blocking.
//! Keys that need a segment read are handed to a fixed pool of I/O contexts,
//! which either promote the record into the mutable region (carrying its
//! staleness counter unchanged) or copy the payload into a caller-owned
//! [`AppCache`]. Prefetching moves records; it never changes a visible value
//! or counter.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, Receiver, Sender};

use crate::error::{Error, Result};
use crate::lockword::Backoff;
use crate::store::{bump, Guard, Inner, Located, LogicalAddress, MemLocate, ReadKind, Spare, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PrefetchStatus {
    Pending = 0,
    /// Already in memory; nothing copied.
    Hit = 1,
    /// Copied from disk into the mutable region.
    Promoted = 2,
    /// Payload written into the application cache.
    Delivered = 3,
    NotFound = 4,
    /// A newer or in-memory version won the race, or the read failed.
    Skipped = 5,
}

impl PrefetchStatus {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => PrefetchStatus::Pending,
            1 => PrefetchStatus::Hit,
            2 => PrefetchStatus::Promoted,
            3 => PrefetchStatus::Delivered,
            4 => PrefetchStatus::NotFound,
            _ => PrefetchStatus::Skipped,
        }
    }

    pub fn is_terminal(self) -> bool {
        self != PrefetchStatus::Pending
    }
}

/// Caller-owned destination buffer: row-major `rows x dim` f32 values with a
/// parallel found bitmap. Row `i` corresponds to the `i`-th key of the
/// lookahead call.
pub struct AppCache {
    dim: usize,
    rows: usize,
    values: Box<[AtomicU32]>,
    found: Box<[AtomicBool]>,
}

impl AppCache {
    pub fn new(rows: usize, dim: usize) -> Arc<Self> {
        Arc::new(AppCache {
            dim,
            rows,
            values: (0..rows * dim).map(|_| AtomicU32::new(0)).collect(),
            found: (0..rows).map(|_| AtomicBool::new(false)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> Option<Vec<f32>> {
        if !self.found[i].load(Ordering::Acquire) {
            return None;
        }
        let r = &self.values[i * self.dim..(i + 1) * self.dim];
        Some(r.iter().map(|v| f32::from_bits(v.load(Ordering::Relaxed))).collect())
    }

    pub fn found_bitmap(&self) -> Vec<bool> {
        self.found.iter().map(|f| f.load(Ordering::Acquire)).collect()
    }

    /// Row-major copy of all rows; rows that were not delivered are zero.
    pub fn to_matrix(&self) -> Vec<f32> {
        self.values.iter().map(|v| f32::from_bits(v.load(Ordering::Relaxed))).collect()
    }

    fn deliver(&self, i: usize, payload: &[f32]) -> bool {
        if payload.len() != self.dim {
            return false;
        }
        for (dst, v) in self.values[i * self.dim..(i + 1) * self.dim].iter().zip(payload) {
            dst.store(v.to_bits(), Ordering::Relaxed);
        }
        self.found[i].store(true, Ordering::Release);
        true
    }
}

impl std::fmt::Debug for AppCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppCache").field("rows", &self.rows).field("dim", &self.dim).finish()
    }
}

#[derive(Debug, Clone)]
pub enum PrefetchDestination {
    StoreBuffer,
    ApplicationCache(Arc<AppCache>),
}

pub(crate) struct TokenState {
    statuses: Box<[AtomicU8]>,
    pending: AtomicUsize,
}

impl TokenState {
    fn complete(&self, i: usize, status: PrefetchStatus) {
        self.statuses[i].store(status as u8, Ordering::Release);
        self.pending.fetch_sub(1, Ordering::AcqRel);
    }
}

/// Handle for one lookahead batch.
#[derive(Clone)]
pub struct PrefetchToken {
    store_uid: u64,
    batch_id: u64,
    state: Arc<TokenState>,
}

impl PrefetchToken {
    pub fn batch_id(&self) -> u64 {
        self.batch_id
    }

    pub fn len(&self) -> usize {
        self.state.statuses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.statuses.is_empty()
    }

    pub fn is_done(&self) -> bool {
        self.state.pending.load(Ordering::Acquire) == 0
    }
}

impl std::fmt::Debug for PrefetchToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PrefetchToken")
            .field("batch_id", &self.batch_id)
            .field("keys", &self.len())
            .finish()
    }
}

struct Job {
    key: u64,
    index: usize,
    dest: PrefetchDestination,
    token: Arc<TokenState>,
}

pub(crate) struct IoPool {
    tx: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
    next_batch: AtomicU64,
}

impl IoPool {
    pub(crate) fn start(inner: Arc<Inner>, contexts: usize, depth: usize) -> IoPool {
        let (tx, rx) = bounded::<Job>(depth);
        let workers = (0..contexts)
            .map(|i| {
                let rx: Receiver<Job> = rx.clone();
                let inner = inner.clone();
                std::thread::Builder::new()
                    .name(format!("stalekv-io-{i}"))
                    .spawn(move || {
                        for job in rx.iter() {
                            let status = run_job(&inner, &job).unwrap_or(PrefetchStatus::Skipped);
                            job.token.complete(job.index, status);
                        }
                    })
                    .expect("spawn I/O context")
            })
            .collect();
        IoPool {
            tx: Some(tx),
            workers,
            next_batch: AtomicU64::new(1),
        }
    }
}

impl Drop for IoPool {
    fn drop(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn run_job(inner: &Inner, job: &Job) -> Result<PrefetchStatus> {
    let mut g = inner.epoch.protect()?;
    let mut spare = Spare::default();
    let b = inner.log.bounds();
    let lk = inner.find(&g, job.key, &b, ReadKind::Prefetch)?;
    match (lk.found, &job.dest) {
        (None, _) => Ok(PrefetchStatus::NotFound),
        (Some(Located::Memory { .. }), PrefetchDestination::StoreBuffer) => Ok(PrefetchStatus::Skipped),
        (Some(Located::Memory { addr, .. }), PrefetchDestination::ApplicationCache(cache)) => {
            let mut backoff = Backoff::new();
            let v = loop {
                if let Some(v) = inner.read_consistent(addr) {
                    break Some(v);
                }
                if inner.log.header(addr).load(Ordering::Acquire) & crate::lockword::REPLACED_BIT != 0 {
                    break None;
                }
                backoff.snooze();
            };
            drop(g);
            let v = match v {
                Some(v) => v,
                None => match inner.peek(job.key)? {
                    Some(v) => v,
                    None => return Ok(PrefetchStatus::NotFound),
                },
            };
            Ok(deliver(cache, job.index, &v))
        }
        (Some(Located::Image(img)), PrefetchDestination::ApplicationCache(cache)) => {
            Ok(deliver(cache, job.index, &img.payload))
        }
        (Some(Located::Image(img)), PrefetchDestination::StoreBuffer) => {
            let s = img.header.staleness();
            if inner.install_copy(&mut g, job.key, lk.bucket, lk.entry, s, &img.payload, &mut spare)? {
                bump_promotion(inner, &g, img.addr);
                return Ok(PrefetchStatus::Promoted);
            }
            promote(inner, &mut g, job.key, img.addr, &img.payload, s, &mut spare)
        }
    }
}

fn deliver(cache: &AppCache, i: usize, v: &[f32]) -> PrefetchStatus {
    if cache.deliver(i, v) {
        PrefetchStatus::Delivered
    } else {
        PrefetchStatus::Skipped
    }
}

fn bump_promotion(inner: &Inner, g: &Guard<'_>, addr: u64) {
    bump(&g.stats().promotions);
    inner.mark_stub_replaced(addr);
}

fn promote(
    inner: &Inner,
    g: &mut Guard<'_>,
    key: u64,
    disk_addr: u64,
    payload: &[f32],
    staleness: u16,
    spare: &mut Spare,
) -> Result<PrefetchStatus> {
    loop {
        if disk_addr >= inner.log.closing.load(Ordering::SeqCst) {
            return Ok(PrefetchStatus::Skipped);
        }
        let Some((bucket, entry)) = inner.validate_front(g, key, disk_addr)? else {
            return Ok(PrefetchStatus::Skipped);
        };
        if inner.install_copy(g, key, bucket, entry, staleness, payload, spare)? {
            bump_promotion(inner, g, disk_addr);
            return Ok(PrefetchStatus::Promoted);
        }
    }
}

impl Store {
    /// Starts loading `keys` without waiting for any I/O. Only admission to a
    /// full submission queue can block.
    pub fn lookahead(&self, keys: &[u64], dest: PrefetchDestination) -> Result<PrefetchToken> {
        if let PrefetchDestination::ApplicationCache(c) = &dest {
            if c.capacity() < keys.len() {
                return Err(Error::ShapeMismatch {
                    expected: keys.len() * c.dim(),
                    actual: c.capacity() * c.dim(),
                });
            }
        }
        let state = Arc::new(TokenState {
            statuses: (0..keys.len()).map(|_| AtomicU8::new(0)).collect(),
            pending: AtomicUsize::new(keys.len()),
        });
        let token = PrefetchToken {
            store_uid: self.uid(),
            batch_id: self.io.next_batch.fetch_add(1, Ordering::Relaxed),
            state: state.clone(),
        };
        let tx = self.io.tx.as_ref().expect("I/O pool running");
        for (i, &key) in keys.iter().enumerate() {
            let loc = {
                let _g = self.inner.epoch.protect()?;
                self.inner.locate_in_memory(key)
            };
            match (loc, &dest) {
                (MemLocate::Absent, _) => state.complete(i, PrefetchStatus::NotFound),
                (MemLocate::Hit, PrefetchDestination::StoreBuffer) => state.complete(i, PrefetchStatus::Hit),
                (MemLocate::Hit, PrefetchDestination::ApplicationCache(cache)) => match self.inner.peek(key)? {
                    Some(v) => state.complete(i, deliver(cache, i, &v)),
                    None => state.complete(i, PrefetchStatus::NotFound),
                },
                (MemLocate::OnDisk, _) => {
                    let job = Job {
                        key,
                        index: i,
                        dest: dest.clone(),
                        token: state.clone(),
                    };
                    if tx.send(job).is_err() {
                        return Err(Error::Io(std::io::Error::other("I/O pool stopped")));
                    }
                }
            }
        }
        Ok(token)
    }

    /// Copies a disk-resident version into the mutable region if it is still
    /// the newest version of `key`.
    pub fn promote_record(
        &self,
        key: u64,
        disk_addr: LogicalAddress,
        payload: &[f32],
        staleness: u16,
    ) -> Result<PrefetchStatus> {
        let mut g = self.inner.epoch.protect()?;
        let mut spare = Spare::default();
        promote(&self.inner, &mut g, key, disk_addr.0, payload, staleness, &mut spare)
    }

    /// Non-blocking status snapshot.
    pub fn poll(&self, token: &PrefetchToken) -> Result<Vec<PrefetchStatus>> {
        if token.store_uid != self.uid() {
            return Err(Error::UnknownToken);
        }
        Ok(token
            .state
            .statuses
            .iter()
            .map(|s| PrefetchStatus::from_u8(s.load(Ordering::Acquire)))
            .collect())
    }

    /// Blocks until every key of `token` reached a terminal status.
    pub fn wait(&self, token: &PrefetchToken) -> Result<Vec<PrefetchStatus>> {
        if token.store_uid != self.uid() {
            return Err(Error::UnknownToken);
        }
        let mut backoff = Backoff::new();
        while !token.is_done() {
            backoff.snooze();
        }
        self.poll(token)
    }
}
