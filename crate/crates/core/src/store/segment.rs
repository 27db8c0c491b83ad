//! Segment files. Segment `n` holds the log page covering logical addresses
//! `[n * size, (n + 1) * size)` followed by a little-endian CRC-64/XZ of the
//! page bytes. Segments are replaced atomically (write temp, rename).

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use crc::{Crc, CRC_64_XZ};
use parking_lot::{Mutex, RwLock};

use crate::error::{Error, Result};
use crate::lockword::LockWord;
use crate::store::layout::{decode_payload, payload_words, HEADER_BYTES};

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

pub fn segment_file_name(n: u64) -> String {
    format!("seg.{n}")
}

/// A record as read back from a segment (or copied out of a closing page).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RecordImage {
    pub addr: u64,
    pub header: LockWord,
    pub prev: u64,
    pub key: u64,
    pub payload: Vec<f32>,
}

pub(crate) struct SegmentStore {
    dir: PathBuf,
    page_size: u64,
    latency: Duration,
    handles: RwLock<HashMap<u64, Arc<File>>>,
    unsynced: Mutex<BTreeSet<u64>>,
}

impl SegmentStore {
    pub(crate) fn new(dir: &Path, page_size: u64, latency: Duration) -> Self {
        SegmentStore {
            dir: dir.to_path_buf(),
            page_size,
            latency,
            handles: RwLock::new(HashMap::new()),
            unsynced: Mutex::new(BTreeSet::new()),
        }
    }

    pub(crate) fn path(&self, n: u64) -> PathBuf {
        self.dir.join(segment_file_name(n))
    }

    pub(crate) fn write_page(&self, n: u64, page: &[u8]) -> Result<()> {
        debug_assert_eq!(page.len() as u64, self.page_size);
        let path = self.path(n);
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(page)?;
            f.write_all(&checksum(page).to_le_bytes())?;
        }
        fs::rename(&tmp, &path)?;
        self.handles.write().remove(&n);
        self.unsynced.lock().insert(n);
        Ok(())
    }

    pub(crate) fn sync_all(&self) -> Result<()> {
        let pending: Vec<u64> = std::mem::take(&mut *self.unsynced.lock()).into_iter().collect();
        for n in pending {
            File::open(self.path(n))?.sync_all()?;
        }
        File::open(&self.dir)?.sync_all()?;
        Ok(())
    }

    fn handle(&self, n: u64) -> Result<Arc<File>> {
        if let Some(f) = self.handles.read().get(&n) {
            return Ok(f.clone());
        }
        let f = Arc::new(File::open(self.path(n))?);
        self.handles.write().insert(n, f.clone());
        Ok(f)
    }

    /// Reads one record. `emulate_latency` applies the configured device delay.
    pub(crate) fn read_record(&self, addr: u64, emulate_latency: bool) -> Result<RecordImage> {
        let n = addr / self.page_size;
        let off = addr % self.page_size;
        let f = self.handle(n)?;
        let mut head = [0u8; HEADER_BYTES as usize];
        f.read_exact_at(&mut head, off)?;
        let word = |i: usize| u64::from_le_bytes(head[i * 8..i * 8 + 8].try_into().unwrap());
        let dim = (word(3) & 0xFFFF) as usize;
        let mut body = vec![0u8; payload_words(dim) * 8];
        f.read_exact_at(&mut body, off + HEADER_BYTES)?;
        if emulate_latency && !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let words = body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()));
        Ok(RecordImage {
            addr,
            header: LockWord(word(0)),
            prev: word(1),
            key: word(2),
            payload: decode_payload(words, dim),
        })
    }

    pub(crate) fn verify(&self, n: u64) -> Result<()> {
        let path = self.path(n);
        let bytes = fs::read(&path).map_err(|_| Error::ChecksumMismatch(path.clone()))?;
        if bytes.len() as u64 != self.page_size + 8 {
            return Err(Error::ChecksumMismatch(path));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != u64::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(Error::ChecksumMismatch(path));
        }
        Ok(())
    }
}
