//! Epoch protection for worker sessions.
//!
//! Every store operation runs inside a protected region. Maintenance (page
//! flush, frame reuse, checkpoint) bumps the global epoch and waits until no
//! session is still protected at an older epoch. Sessions are bound to threads
//! lazily; a slot is returned to the table when its thread exits.

use std::cell::RefCell;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};

use crossbeam_utils::CachePadded;

use crate::error::{Error, Result};
use crate::lockword::Backoff;
use crate::store::stats::SlotStats;

pub(crate) const MAX_SESSIONS: usize = 512;

static NEXT_TABLE_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Slot {
    epoch: AtomicU64,
    pub(crate) stats: SlotStats,
}

pub(crate) struct EpochTable {
    id: u64,
    global: CachePadded<AtomicU64>,
    quiesce: CachePadded<AtomicBool>,
    slots: Box<[CachePadded<Slot>]>,
    in_use: Box<[AtomicBool]>,
}

struct Registration {
    table_id: u64,
    slot: usize,
    table: Weak<EpochTable>,
}

impl Drop for Registration {
    fn drop(&mut self) {
        if let Some(t) = self.table.upgrade() {
            t.slots[self.slot].epoch.store(0, Ordering::SeqCst);
            t.in_use[self.slot].store(false, Ordering::Release);
        }
    }
}

thread_local! {
    static SESSIONS: RefCell<Vec<Registration>> = const { RefCell::new(Vec::new()) };
}

impl EpochTable {
    pub(crate) fn new() -> Arc<Self> {
        Arc::new(EpochTable {
            id: NEXT_TABLE_ID.fetch_add(1, Ordering::Relaxed),
            global: CachePadded::new(AtomicU64::new(1)),
            quiesce: CachePadded::new(AtomicBool::new(false)),
            slots: (0..MAX_SESSIONS)
                .map(|_| {
                    CachePadded::new(Slot {
                        epoch: AtomicU64::new(0),
                        stats: SlotStats::default(),
                    })
                })
                .collect(),
            in_use: (0..MAX_SESSIONS).map(|_| AtomicBool::new(false)).collect(),
        })
    }

    fn session_slot(self: &Arc<Self>) -> Result<usize> {
        SESSIONS.with(|cell| {
            let mut regs = cell.borrow_mut();
            if let Some(r) = regs.iter().find(|r| r.table_id == self.id) {
                return Ok(r.slot);
            }
            regs.retain(|r| r.table.strong_count() > 0);
            for (i, used) in self.in_use.iter().enumerate() {
                if used
                    .compare_exchange(false, true, Ordering::AcqRel, Ordering::Relaxed)
                    .is_ok()
                {
                    regs.push(Registration {
                        table_id: self.id,
                        slot: i,
                        table: Arc::downgrade(self),
                    });
                    return Ok(i);
                }
            }
            Err(Error::TooManySessions)
        })
    }

    pub(crate) fn protect(self: &Arc<Self>) -> Result<Guard<'_>> {
        let slot = self.session_slot()?;
        debug_assert_eq!(
            self.slots[slot].epoch.load(Ordering::Relaxed),
            0,
            "nested protection on one session"
        );
        let mut g = Guard {
            table: self,
            slot,
            active: false,
        };
        g.reprotect();
        Ok(g)
    }

    fn enter(&self, slot: usize) {
        let mut backoff = Backoff::new();
        loop {
            let e = self.global.load(Ordering::SeqCst);
            self.slots[slot].epoch.store(e, Ordering::SeqCst);
            if !self.quiesce.load(Ordering::SeqCst) {
                return;
            }
            self.slots[slot].epoch.store(0, Ordering::SeqCst);
            while self.quiesce.load(Ordering::SeqCst) {
                backoff.snooze();
            }
        }
    }

    /// Advances the global epoch and waits for every session protected at an
    /// older epoch to leave. The caller must not be protected itself.
    pub(crate) fn bump_and_drain(&self) {
        let target = self.global.fetch_add(1, Ordering::SeqCst) + 1;
        for slot in self.slots.iter() {
            let mut backoff = Backoff::new();
            loop {
                let e = slot.epoch.load(Ordering::SeqCst);
                if e == 0 || e >= target {
                    break;
                }
                backoff.snooze();
            }
        }
    }

    /// Blocks new operations and waits until none is in flight.
    pub(crate) fn quiesce(&self) -> QuiesceGuard<'_> {
        let mut backoff = Backoff::new();
        while self
            .quiesce
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            backoff.snooze();
        }
        for slot in self.slots.iter() {
            let mut backoff = Backoff::new();
            while slot.epoch.load(Ordering::SeqCst) != 0 {
                backoff.snooze();
            }
        }
        QuiesceGuard { table: self }
    }

    pub(crate) fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.slots.iter().map(|s| &**s)
    }
}

pub(crate) struct QuiesceGuard<'a> {
    table: &'a EpochTable,
}

impl Drop for QuiesceGuard<'_> {
    fn drop(&mut self) {
        self.table.quiesce.store(false, Ordering::SeqCst);
    }
}

pub(crate) struct Guard<'a> {
    table: &'a EpochTable,
    slot: usize,
    active: bool,
}

impl Guard<'_> {
    pub(crate) fn unprotect(&mut self) {
        if self.active {
            self.table.slots[self.slot].epoch.store(0, Ordering::SeqCst);
            self.active = false;
        }
    }

    pub(crate) fn reprotect(&mut self) {
        if !self.active {
            self.table.enter(self.slot);
            self.active = true;
        }
    }

    #[inline]
    pub(crate) fn slot(&self) -> usize {
        self.slot
    }

    #[inline]
    pub(crate) fn stats(&self) -> &SlotStats {
        &self.table.slots[self.slot].stats
    }
}

impl Drop for Guard<'_> {
    fn drop(&mut self) {
        self.unprotect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::time::Duration;

    #[test]
    fn slots_are_reused_after_thread_exit() {
        let t = EpochTable::new();
        for _ in 0..(MAX_SESSIONS * 2) {
            let t2 = t.clone();
            std::thread::spawn(move || {
                let _g = t2.protect().unwrap();
            })
            .join()
            .unwrap();
        }
        assert!(t.in_use.iter().filter(|u| u.load(Ordering::Relaxed)).count() <= 1);
    }

    #[test]
    fn drain_waits_for_protected_session() {
        let t = EpochTable::new();
        let done = Arc::new(AtomicUsize::new(0));
        let (t2, d2) = (t.clone(), done.clone());
        let (tx, rx) = std::sync::mpsc::channel();
        let h = std::thread::spawn(move || {
            let _g = t2.protect().unwrap();
            tx.send(()).unwrap();
            std::thread::sleep(Duration::from_millis(50));
            d2.store(1, Ordering::SeqCst);
        });
        rx.recv().unwrap();
        t.bump_and_drain();
        assert_eq!(done.load(Ordering::SeqCst), 1);
        h.join().unwrap();
    }

    #[test]
    fn quiesce_blocks_new_entries() {
        let t = EpochTable::new();
        let entered = Arc::new(AtomicUsize::new(0));
        let q = t.quiesce();
        let (t2, e2) = (t.clone(), entered.clone());
        let h = std::thread::spawn(move || {
            let _g = t2.protect().unwrap();
            e2.store(1, Ordering::SeqCst);
        });
        std::thread::sleep(Duration::from_millis(30));
        assert_eq!(entered.load(Ordering::SeqCst), 0);
        drop(q);
        h.join().unwrap();
        assert_eq!(entered.load(Ordering::SeqCst), 1);
    }
}
