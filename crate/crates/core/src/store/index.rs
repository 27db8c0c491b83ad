//! Fixed-size latch-free hash index. Each bucket holds the logical address of
//! the newest record in its chain; older records are reached through
//! `Record.prev`, which always points to a lower address.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::store::segment::checksum;

pub(crate) struct HashIndex {
    buckets: Box<[AtomicU64]>,
    mask: u64,
}

#[inline]
pub(crate) fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl HashIndex {
    pub(crate) fn new(buckets: u64) -> Self {
        debug_assert!(buckets.is_power_of_two());
        HashIndex {
            buckets: (0..buckets).map(|_| AtomicU64::new(0)).collect(),
            mask: buckets - 1,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.buckets.len()
    }

    #[inline]
    pub(crate) fn bucket_of(&self, key: u64) -> usize {
        (mix64(key) & self.mask) as usize
    }

    #[inline]
    pub(crate) fn load(&self, bucket: usize) -> u64 {
        self.buckets[bucket].load(Ordering::Acquire)
    }

    #[inline]
    pub(crate) fn cas(&self, bucket: usize, expected: u64, new: u64) -> Result<(), u64> {
        self.buckets[bucket]
            .compare_exchange(expected, new, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| ())
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.buckets.iter().all(|b| b.load(Ordering::Relaxed) == 0)
    }

    /// Snapshot layout: bucket words little-endian, then a 64-bit checksum.
    pub(crate) fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.buckets.len() * 8 + 8);
        for b in self.buckets.iter() {
            bytes.extend_from_slice(&b.load(Ordering::Acquire).to_le_bytes());
        }
        let sum = checksum(&bytes);
        bytes.extend_from_slice(&sum.to_le_bytes());
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub(crate) fn read_snapshot(path: &Path, buckets: u64) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() as u64 != buckets * 8 + 8 {
            return Err(Error::ChecksumMismatch(path.to_path_buf()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != u64::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(Error::ChecksumMismatch(path.to_path_buf()));
        }
        let idx = HashIndex::new(buckets);
        for (b, chunk) in idx.buckets.iter().zip(body.chunks_exact(8)) {
            b.store(u64::from_le_bytes(chunk.try_into().unwrap()), Ordering::Relaxed);
        }
        Ok(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.1");
        let idx = HashIndex::new(16);
        idx.cas(3, 0, 4242).unwrap();
        idx.cas(15, 0, 77).unwrap();
        idx.write_snapshot(&p).unwrap();
        let back = HashIndex::read_snapshot(&p, 16).unwrap();
        for b in 0..16 {
            assert_eq!(back.load(b), idx.load(b));
        }

        let mut bytes = fs::read(&p).unwrap();
        bytes[24] ^= 1;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(HashIndex::read_snapshot(&p, 16), Err(Error::ChecksumMismatch(_))));
    }

    #[test]
    fn cas_reports_current() {
        let idx = HashIndex::new(4);
        assert!(idx.cas(0, 0, 8).is_ok());
        assert_eq!(idx.cas(0, 0, 16), Err(8));
    }
}
