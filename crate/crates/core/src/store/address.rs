use std::fmt;

/// Byte offset into the append-only log address space. Only the low 48 bits
/// are meaningful; `0` is the null address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, serde::Serialize, serde::Deserialize)]
pub struct LogicalAddress(pub u64);

pub const ADDRESS_BITS: u32 = 48;
pub const ADDRESS_MASK: u64 = (1 << ADDRESS_BITS) - 1;

impl LogicalAddress {
    pub const NULL: LogicalAddress = LogicalAddress(0);

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    pub fn offset(self) -> u64 {
        self.0
    }
}

impl fmt::Debug for LogicalAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@{}", self.0)
    }
}

/// Snapshot of the hybrid-log boundaries.
///
/// Addresses below `head` live in segment files, `[head, read_only)` is the
/// immutable in-memory region and `[read_only, tail)` is updated in place.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionBounds {
    pub head: LogicalAddress,
    pub read_only: LogicalAddress,
    pub tail: LogicalAddress,
}

impl RegionBounds {
    pub fn is_ordered(&self) -> bool {
        self.head <= self.read_only && self.read_only <= self.tail
    }
}
