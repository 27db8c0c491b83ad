//! In-memory page frames of the hybrid log and its region boundaries.

use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_utils::CachePadded;

use crate::lockword::LockWord;
use crate::store::layout::{self, W_DIM, W_HEADER, W_KEY, W_PREV};

/// First allocatable address; `0` stays the null address.
pub const LOG_START: u64 = 64;

pub(crate) struct Log {
    page_bits: u32,
    pub(crate) page_size: u64,
    pub(crate) nframes: u64,
    pub(crate) mutable_pages: u64,
    frames: Box<[Box<[AtomicU64]>]>,
    pub(crate) tail: CachePadded<AtomicU64>,
    pub(crate) read_only: CachePadded<AtomicU64>,
    /// Pages in `[head, closing)` are being written to segment files and may
    /// only be copied, never locked in place.
    pub(crate) closing: CachePadded<AtomicU64>,
    pub(crate) head: CachePadded<AtomicU64>,
    /// Frames holding pages below this address may be reused.
    pub(crate) reclaimed: CachePadded<AtomicU64>,
}

/// Boundaries observed by one operation attempt.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Bounds {
    pub head: u64,
    pub closing: u64,
    pub read_only: u64,
}

impl Log {
    pub(crate) fn new(page_size: u64, nframes: u64, mutable_fraction: f64, start: u64) -> Self {
        let words = (page_size / 8) as usize;
        let frames = (0..nframes)
            .map(|_| (0..words).map(|_| AtomicU64::new(0)).collect::<Box<[_]>>())
            .collect();
        let mutable_pages = ((nframes as f64 * mutable_fraction).floor() as u64).clamp(1, nframes);
        Log {
            page_bits: page_size.trailing_zeros(),
            page_size,
            nframes,
            mutable_pages,
            frames,
            tail: CachePadded::new(AtomicU64::new(start)),
            read_only: CachePadded::new(AtomicU64::new(start)),
            closing: CachePadded::new(AtomicU64::new(start)),
            head: CachePadded::new(AtomicU64::new(start)),
            reclaimed: CachePadded::new(AtomicU64::new(start)),
        }
    }

    #[inline]
    pub(crate) fn page_of(&self, addr: u64) -> u64 {
        addr >> self.page_bits
    }

    #[inline]
    pub(crate) fn page_start(&self, page: u64) -> u64 {
        page << self.page_bits
    }

    #[inline]
    pub(crate) fn word(&self, addr: u64, i: usize) -> &AtomicU64 {
        let frame = (self.page_of(addr) % self.nframes) as usize;
        let off = ((addr & (self.page_size - 1)) / 8) as usize + i;
        &self.frames[frame][off]
    }

    pub(crate) fn bounds(&self) -> Bounds {
        Bounds {
            head: self.head.load(Ordering::SeqCst),
            closing: self.closing.load(Ordering::SeqCst),
            read_only: self.read_only.load(Ordering::SeqCst),
        }
    }

    #[inline]
    pub(crate) fn header(&self, addr: u64) -> &AtomicU64 {
        self.word(addr, W_HEADER)
    }

    #[inline]
    pub(crate) fn key_at(&self, addr: u64) -> u64 {
        self.word(addr, W_KEY).load(Ordering::Relaxed)
    }

    #[inline]
    pub(crate) fn prev_at(&self, addr: u64) -> u64 {
        self.word(addr, W_PREV).load(Ordering::Relaxed)
    }

    #[inline]
    pub(crate) fn dim_at(&self, addr: u64) -> usize {
        (self.word(addr, W_DIM).load(Ordering::Relaxed) & 0xFFFF) as usize
    }

    pub(crate) fn set_prev(&self, addr: u64, prev: u64) {
        self.word(addr, W_PREV).store(prev, Ordering::Relaxed);
    }

    /// Fills an unpublished slot. Publication happens through the index CAS.
    pub(crate) fn write_record(&self, addr: u64, header: LockWord, prev: u64, key: u64, payload: &[f32]) {
        self.header(addr).store(header.0, Ordering::Relaxed);
        self.set_prev(addr, prev);
        self.word(addr, W_KEY).store(key, Ordering::Relaxed);
        self.word(addr, W_DIM).store(payload.len() as u64, Ordering::Relaxed);
        self.write_payload(addr, payload);
    }

    pub(crate) fn read_payload(&self, addr: u64, dim: usize) -> Vec<f32> {
        let words = (0..layout::payload_words(dim))
            .map(|i| self.word(addr, layout::HEADER_WORDS + i).load(Ordering::Relaxed));
        layout::decode_payload(words, dim)
    }

    pub(crate) fn write_payload(&self, addr: u64, values: &[f32]) {
        for (i, pair) in values.chunks(2).enumerate() {
            let hi = pair.get(1).copied().unwrap_or(0.0);
            self.word(addr, layout::HEADER_WORDS + i)
                .store(layout::pack_pair(pair[0], hi), Ordering::Relaxed);
        }
    }

    /// In-place `payload += delta`. Caller holds the record lock.
    pub(crate) fn add_payload(&self, addr: u64, delta: &[f32]) {
        for (i, pair) in delta.chunks(2).enumerate() {
            let w = self.word(addr, layout::HEADER_WORDS + i);
            let (a, b) = layout::unpack_pair(w.load(Ordering::Relaxed));
            let hi = if pair.len() == 2 { b + pair[1] } else { b };
            w.store(layout::pack_pair(a + pair[0], hi), Ordering::Relaxed);
        }
    }

    pub(crate) fn page_bytes(&self, page: u64) -> Vec<u8> {
        let frame = &self.frames[(page % self.nframes) as usize];
        let mut out = Vec::with_capacity(self.page_size as usize);
        for w in frame.iter() {
            out.extend_from_slice(&w.load(Ordering::Relaxed).to_le_bytes());
        }
        out
    }

    pub(crate) fn zero_page(&self, page: u64) {
        for w in self.frames[(page % self.nframes) as usize].iter() {
            w.store(0, Ordering::Relaxed);
        }
    }
}
