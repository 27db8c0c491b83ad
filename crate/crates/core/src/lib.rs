//! Disk-backed key-value store for embedding training with per-record
//! bounded staleness.

pub mod bench;
pub mod cli;
pub mod error;
pub mod lockword;
pub mod prefetch;
pub mod store;
pub mod tables;
pub mod train;

pub use error::{Error, Result};
pub use lockword::{LockWord, StalenessBound};
pub use prefetch::{AppCache, PrefetchDestination, PrefetchStatus, PrefetchToken};
pub use store::{Region, Store, StoreConfig, StoreStats, WriteOutcome};
pub use tables::{EmbeddingBatch, TableHandle, TableMeta};
