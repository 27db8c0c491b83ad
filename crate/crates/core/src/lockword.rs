//! Record lock word and the bounded-staleness acquire/release protocol.
//!
//! Every record carries a 64-bit header that doubles as a latch-free lock and
//! a per-record staleness counter:
//!
//! ```text
//!  63     62       61 ........ 32   31 ...... 16   15 ....... 0
//! [locked][replaced][ generation  ][  reserved   ][ staleness  ]
//! ```
//!
//! All functions here are pure word transformers. The caller owns the shared
//! `AtomicU64` and installs the returned word with a compare-and-swap (acquire,
//! cancel) or a swap (release).

use std::fmt;
use std::time::Duration;

use thiserror::Error;

pub const LOCKED_BIT: u64 = 1 << 63;
pub const REPLACED_BIT: u64 = 1 << 62;
pub const GENERATION_SHIFT: u32 = 32;
pub const GENERATION_BITS: u32 = 30;
pub const GENERATION_MASK: u64 = (1 << GENERATION_BITS) - 1;
pub const RESERVED_MASK: u64 = 0xFFFF_0000;
pub const STALENESS_MASK: u64 = 0xFFFF;
pub const MAX_STALENESS: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LockWordError {
    #[error("lock word field `{0}` exceeds its bit width")]
    FieldOverflow(&'static str),
    #[error("staleness counter would exceed {MAX_STALENESS}")]
    StalenessCounterSaturated,
    #[error("release of a lock word that is not locked")]
    NotLocked,
    #[error("staleness counter underflow")]
    Underflow,
}

/// Unpacked view of a lock word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LockFields {
    pub locked: bool,
    pub replaced: bool,
    pub generation: u32,
    pub reserved: u16,
    pub staleness: u16,
}

/// A packed 64-bit record header.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LockWord(pub u64);

impl LockWord {
    pub const ZERO: LockWord = LockWord(0);

    #[inline]
    pub fn locked(self) -> bool {
        self.0 & LOCKED_BIT != 0
    }

    #[inline]
    pub fn replaced(self) -> bool {
        self.0 & REPLACED_BIT != 0
    }

    #[inline]
    pub fn generation(self) -> u32 {
        ((self.0 >> GENERATION_SHIFT) & GENERATION_MASK) as u32
    }

    #[inline]
    pub fn staleness(self) -> u16 {
        (self.0 & STALENESS_MASK) as u16
    }

    #[inline]
    fn with_staleness(self, s: u16) -> LockWord {
        LockWord((self.0 & !STALENESS_MASK) | s as u64)
    }

    pub fn unpack(self) -> LockFields {
        LockFields {
            locked: self.locked(),
            replaced: self.replaced(),
            generation: self.generation(),
            reserved: ((self.0 & RESERVED_MASK) >> 16) as u16,
            staleness: self.staleness(),
        }
    }

    /// Header as persisted on disk: unlocked, everything else preserved.
    #[inline]
    pub fn persisted(self) -> LockWord {
        LockWord(self.0 & !LOCKED_BIT)
    }
}

impl fmt::Debug for LockWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "LockWord({:#018x} locked={} replaced={} gen={} stale={})",
            self.0,
            self.locked() as u8,
            self.replaced() as u8,
            self.generation(),
            self.staleness()
        )
    }
}

impl From<LockWord> for u64 {
    fn from(w: LockWord) -> u64 {
        w.0
    }
}

/// Packs header fields into a word. The generation is taken as `u32` so that
/// out-of-range values are reported rather than silently truncated.
pub fn pack(fields: LockFields) -> Result<LockWord, LockWordError> {
    if fields.generation as u64 > GENERATION_MASK {
        return Err(LockWordError::FieldOverflow("generation"));
    }
    if fields.reserved != 0 {
        return Err(LockWordError::FieldOverflow("reserved"));
    }
    let mut w = fields.staleness as u64;
    w |= (fields.generation as u64) << GENERATION_SHIFT;
    if fields.locked {
        w |= LOCKED_BIT;
    }
    if fields.replaced {
        w |= REPLACED_BIT;
    }
    Ok(LockWord(w))
}

/// Per-session read policy. `0` is bulk-synchronous, `INFINITY` is fully
/// asynchronous, anything in between is stale-synchronous.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct StalenessBound(pub u64);

impl StalenessBound {
    pub const INFINITY: StalenessBound = StalenessBound(i64::MAX as u64);
    pub const BSP: StalenessBound = StalenessBound(0);

    pub fn new(value: u64) -> Self {
        StalenessBound(value.min(Self::INFINITY.0))
    }

    pub fn is_infinite(self) -> bool {
        self.0 >= Self::INFINITY.0
    }

    #[inline]
    pub fn admits(self, staleness: u16) -> bool {
        staleness as u64 <= self.0
    }
}

impl fmt::Debug for StalenessBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for StalenessBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl std::str::FromStr for StalenessBound {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(StalenessBound::INFINITY);
        }
        let v: u64 = s
            .parse()
            .map_err(|_| format!("invalid staleness bound `{s}` (expected a non-negative integer or `inf`)"))?;
        if v > StalenessBound::INFINITY.0 {
            return Err(format!("staleness bound `{s}` exceeds {}", StalenessBound::INFINITY.0));
        }
        Ok(StalenessBound(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquireOutcome {
    Acquired(LockWord),
    RetryAddressChanged,
    WaitStaleness(u16),
    WaitLocked,
}

pub fn try_acquire_read(current: LockWord, bound: StalenessBound) -> Result<AcquireOutcome, LockWordError> {
    if current.replaced() {
        return Ok(AcquireOutcome::RetryAddressChanged);
    }
    if current.locked() {
        return Ok(AcquireOutcome::WaitLocked);
    }
    let s = current.staleness();
    if !bound.admits(s) {
        return Ok(AcquireOutcome::WaitStaleness(s));
    }
    if s == MAX_STALENESS {
        return Err(LockWordError::StalenessCounterSaturated);
    }
    Ok(AcquireOutcome::Acquired(LockWord(
        current.with_staleness(s + 1).0 | LOCKED_BIT,
    )))
}

/// Writes skip the staleness gate; they only ever reduce the counter, which
/// floors at zero for blind upserts.
pub fn try_acquire_write(current: LockWord) -> AcquireOutcome {
    if current.replaced() {
        return AcquireOutcome::RetryAddressChanged;
    }
    if current.locked() {
        return AcquireOutcome::WaitLocked;
    }
    let s = current.staleness().saturating_sub(1);
    AcquireOutcome::Acquired(LockWord(current.with_staleness(s).0 | LOCKED_BIT))
}

/// Lock-only acquisition used when the staleness machinery is switched off,
/// and for internal maintenance (promotion) that must not touch the counter.
pub fn try_acquire_plain(current: LockWord) -> AcquireOutcome {
    if current.replaced() {
        return AcquireOutcome::RetryAddressChanged;
    }
    if current.locked() {
        return AcquireOutcome::WaitLocked;
    }
    AcquireOutcome::Acquired(LockWord(current.0 | LOCKED_BIT))
}

/// Adds one outstanding read without consulting the bound. Used for repeated
/// keys within a batch whose first occurrence already passed the gate.
pub fn try_add_reader(current: LockWord) -> Result<AcquireOutcome, LockWordError> {
    if current.replaced() {
        return Ok(AcquireOutcome::RetryAddressChanged);
    }
    if current.locked() {
        return Ok(AcquireOutcome::WaitLocked);
    }
    let s = current.staleness();
    if s == MAX_STALENESS {
        return Err(LockWordError::StalenessCounterSaturated);
    }
    Ok(AcquireOutcome::Acquired(current.with_staleness(s + 1)))
}

pub fn release(current: LockWord) -> Result<LockWord, LockWordError> {
    if !current.locked() {
        return Err(LockWordError::NotLocked);
    }
    let gen = (current.generation() as u64 + 1) & GENERATION_MASK;
    let cleared = current.0 & !(LOCKED_BIT | (GENERATION_MASK << GENERATION_SHIFT));
    Ok(LockWord(cleared | (gen << GENERATION_SHIFT)))
}

pub fn mark_replaced(current: LockWord) -> LockWord {
    LockWord(current.0 | REPLACED_BIT)
}

pub fn cancel_read(current: LockWord) -> Result<LockWord, LockWordError> {
    match current.staleness() {
        0 => Err(LockWordError::Underflow),
        s => Ok(current.with_staleness(s - 1)),
    }
}

/// Exponential backoff for Wait outcomes: short spins, then cooperative
/// yields, then capped sleeps.
#[derive(Debug, Default)]
pub struct Backoff {
    step: u32,
}

const SPIN_LIMIT: u32 = 6;
const YIELD_LIMIT: u32 = 12;
const MAX_SLEEP: Duration = Duration::from_micros(200);

impl Backoff {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.step = 0;
    }

    pub fn snooze(&mut self) {
        if self.step <= SPIN_LIMIT {
            for _ in 0..(1u32 << self.step) {
                std::hint::spin_loop();
            }
        } else if self.step <= YIELD_LIMIT {
            std::thread::yield_now();
        } else {
            let exp = (self.step - YIELD_LIMIT).min(12);
            let d = Duration::from_nanos(100u64 << exp).min(MAX_SLEEP);
            std::thread::sleep(d);
        }
        self.step = self.step.saturating_add(1);
    }
}
