use std::sync::atomic::{AtomicU64, Ordering};

/// Buckets of the staleness histogram: bucket 0 holds staleness 0, bucket
/// `i > 0` holds `[2^(i-1), 2^i)`.
pub const HISTOGRAM_BUCKETS: usize = 17;

pub fn histogram_bucket(staleness: u16) -> usize {
    if staleness == 0 {
        0
    } else {
        (16 - staleness.leading_zeros()) as usize
    }
}

/// Per-session counters. Each slot is written by one thread only.
#[derive(Default)]
pub(crate) struct SlotStats {
    pub disk_reads: AtomicU64,
    pub prefetch_reads: AtomicU64,
    pub maintenance_reads: AtomicU64,
    pub reads_acquired: AtomicU64,
    pub gate_waits: AtomicU64,
    pub lock_waits: AtomicU64,
    pub audit_violations: AtomicU64,
    pub inplace_updates: AtomicU64,
    pub rcu_updates: AtomicU64,
    pub inserts: AtomicU64,
    pub promotions: AtomicU64,
    pub histogram: [AtomicU64; HISTOGRAM_BUCKETS],
}

#[inline]
pub(crate) fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

/// Aggregated store counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StoreStats {
    /// Synchronous record reads from segment files issued by get/put/rmw.
    pub disk_reads: u64,
    /// Record reads issued by lookahead I/O contexts.
    pub prefetch_reads: u64,
    pub maintenance_reads: u64,
    pub reads_acquired: u64,
    /// Reads that found the staleness gate closed at least once.
    pub gate_waits: u64,
    pub lock_waits: u64,
    /// Acquired reads whose pre-CAS staleness exceeded the session bound.
    pub audit_violations: u64,
    pub inplace_updates: u64,
    pub rcu_updates: u64,
    pub inserts: u64,
    pub promotions: u64,
    pub flushed_pages: u64,
    pub staleness_histogram: [u64; HISTOGRAM_BUCKETS],
}

impl StoreStats {
    pub(crate) fn add_slot(&mut self, s: &SlotStats) {
        let l = |c: &AtomicU64| c.load(Ordering::Relaxed);
        self.disk_reads += l(&s.disk_reads);
        self.prefetch_reads += l(&s.prefetch_reads);
        self.maintenance_reads += l(&s.maintenance_reads);
        self.reads_acquired += l(&s.reads_acquired);
        self.gate_waits += l(&s.gate_waits);
        self.lock_waits += l(&s.lock_waits);
        self.audit_violations += l(&s.audit_violations);
        self.inplace_updates += l(&s.inplace_updates);
        self.rcu_updates += l(&s.rcu_updates);
        self.inserts += l(&s.inserts);
        self.promotions += l(&s.promotions);
        for (dst, src) in self.staleness_histogram.iter_mut().zip(&s.histogram) {
            *dst += l(src);
        }
    }

    /// Counter-wise difference `self - earlier`.
    pub fn since(&self, earlier: &StoreStats) -> StoreStats {
        let mut h = [0u64; HISTOGRAM_BUCKETS];
        for (i, v) in h.iter_mut().enumerate() {
            *v = self.staleness_histogram[i] - earlier.staleness_histogram[i];
        }
        StoreStats {
            disk_reads: self.disk_reads - earlier.disk_reads,
            prefetch_reads: self.prefetch_reads - earlier.prefetch_reads,
            maintenance_reads: self.maintenance_reads - earlier.maintenance_reads,
            reads_acquired: self.reads_acquired - earlier.reads_acquired,
            gate_waits: self.gate_waits - earlier.gate_waits,
            lock_waits: self.lock_waits - earlier.lock_waits,
            audit_violations: self.audit_violations - earlier.audit_violations,
            inplace_updates: self.inplace_updates - earlier.inplace_updates,
            rcu_updates: self.rcu_updates - earlier.rcu_updates,
            inserts: self.inserts - earlier.inserts,
            promotions: self.promotions - earlier.promotions,
            flushed_pages: self.flushed_pages - earlier.flushed_pages,
            staleness_histogram: h,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets() {
        assert_eq!(histogram_bucket(0), 0);
        assert_eq!(histogram_bucket(1), 1);
        assert_eq!(histogram_bucket(2), 2);
        assert_eq!(histogram_bucket(3), 2);
        assert_eq!(histogram_bucket(4), 3);
        assert_eq!(histogram_bucket(u16::MAX), 16);
    }
}
