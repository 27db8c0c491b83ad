//! Batch embedding-table interface over the store.
//!
//! A table is identified by a 16-bit model id; its records live under
//! composite keys `(model_id << 48) | feature`. The staleness bound belongs to
//! the handle, not to the records, so reopening with another bound changes
//! only the read policy of the new handle.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lockword::StalenessBound;
use crate::prefetch::{PrefetchDestination, PrefetchToken};
use crate::store::layout::MAX_DIM;
use crate::store::{Store, WriteOutcome};

pub const FEATURE_BITS: u32 = 48;
pub const FEATURE_MASK: u64 = (1 << FEATURE_BITS) - 1;
pub const MAX_MODEL_ID: u32 = u16::MAX as u32;

/// Composite store key of `feature` in table `model_id`.
pub fn compose_key(model_id: u16, feature: u64) -> Result<u64> {
    if feature > FEATURE_MASK {
        return Err(Error::KeyOutOfRange(feature));
    }
    Ok(((model_id as u64) << FEATURE_BITS) | feature)
}

pub fn split_key(key: u64) -> (u16, u64) {
    ((key >> FEATURE_BITS) as u16, key & FEATURE_MASK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub model_id: u16,
    pub dim: usize,
    /// Bound of the handle that created the table; informational only.
    pub bound: StalenessBound,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub key_count: u64,
}

pub(crate) struct TableEntry {
    model_id: u16,
    dim: usize,
    bound: StalenessBound,
    created_at: u64,
    key_count: Arc<AtomicU64>,
}

impl TableEntry {
    pub(crate) fn from_meta(m: TableMeta) -> Self {
        TableEntry {
            model_id: m.model_id,
            dim: m.dim,
            bound: m.bound,
            created_at: m.created_at,
            key_count: Arc::new(AtomicU64::new(m.key_count)),
        }
    }

    pub(crate) fn meta(&self) -> TableMeta {
        TableMeta {
            model_id: self.model_id,
            dim: self.dim,
            bound: self.bound,
            created_at: self.created_at,
            key_count: self.key_count.load(Ordering::Relaxed),
        }
    }
}

/// Rows of one batch lookup, positionally aligned with the requested keys.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub keys: Vec<u64>,
    pub dim: usize,
    /// Row-major `keys.len() x dim`.
    pub values: Vec<f32>,
    /// `missing[i]` is set when `keys[i]` has no record; its row is zero.
    pub missing: Vec<bool>,
}

impl EmbeddingBatch {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Shareable handle to one embedding table with a session staleness bound.
#[derive(Clone, Debug)]
pub struct TableHandle {
    store: Store,
    model_id: u16,
    dim: usize,
    bound: StalenessBound,
    key_count: Arc<AtomicU64>,
}

impl Store {
    /// Creates table `model_id` or reopens it with a new session bound.
    pub fn open_model(&self, model_id: u32, dim: usize, bound: StalenessBound) -> Result<TableHandle> {
        if model_id > MAX_MODEL_ID {
            return Err(Error::TooManyModels(model_id));
        }
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::DimMismatch {
                expected: MAX_DIM,
                actual: dim,
            });
        }
        let id = model_id as u16;
        let mut tables = self.inner.tables.lock();
        let entry = tables.entry(id).or_insert_with(|| TableEntry {
            model_id: id,
            dim,
            bound,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            key_count: Arc::new(AtomicU64::new(0)),
        });
        if entry.dim != dim {
            return Err(Error::DimMismatch {
                expected: entry.dim,
                actual: dim,
            });
        }
        Ok(TableHandle {
            store: self.clone(),
            model_id: id,
            dim,
            bound,
            key_count: entry.key_count.clone(),
        })
    }

    pub fn table_metas(&self) -> Vec<TableMeta> {
        self.inner.tables.lock().values().map(TableEntry::meta).collect()
    }
}

impl TableHandle {
    pub fn model_id(&self) -> u16 {
        self.model_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bound(&self) -> StalenessBound {
        self.bound
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Keys inserted through this table, including before the last restart.
    pub fn key_count(&self) -> u64 {
        self.key_count.load(Ordering::Relaxed)
    }

    pub fn key(&self, feature: u64) -> Result<u64> {
        compose_key(self.model_id, feature)
    }

    fn keys(&self, features: &[u64]) -> Result<Vec<u64>> {
        features.iter().map(|&f| self.key(f)).collect()
    }

    fn check_shape(&self, n: usize, values: &[f32]) -> Result<()> {
        if values.len() != n * self.dim {
            return Err(Error::ShapeMismatch {
                expected: n * self.dim,
                actual: values.len(),
            });
        }
        Ok(())
    }

    fn note(&self, outcome: WriteOutcome) {
        if outcome == WriteOutcome::Inserted {
            self.key_count.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Gated batch read. Every returned present row counts one outstanding
    /// read that must be paired with an rmw, put or cancel.
    ///
    /// Distinct keys are acquired in ascending key order so that concurrent
    /// batches cannot wait on each other in a cycle at bound 0. A repeated key
    /// counts one more read without consulting the gate.
    pub fn get_batch(&self, features: &[u64]) -> Result<EmbeddingBatch> {
        self.read_batch(features, |store, key| match store.get(key, self.bound) {
            Ok(v) => Ok(Some(v)),
            Err(Error::NotFound) => Ok(None),
            Err(e) => Err(e),
        })
    }

    /// Like [`get_batch`](Self::get_batch), but first inserts `init(feature)`
    /// for absent keys, so no row is missing.
    pub fn get_or_init_batch(
        &self,
        features: &[u64],
        init: impl Fn(u64) -> Vec<f32>,
    ) -> Result<EmbeddingBatch> {
        self.read_batch(features, |store, key| {
            let (v, inserted) = store.get_or_insert_with(key, self.bound, || init(key & FEATURE_MASK))?;
            if inserted {
                self.key_count.fetch_add(1, Ordering::Relaxed);
            }
            Ok(Some(v))
        })
    }

    fn read_batch(
        &self,
        features: &[u64],
        first: impl Fn(&Store, u64) -> Result<Option<Vec<f32>>>,
    ) -> Result<EmbeddingBatch> {
        let keys = self.keys(features)?;
        let n = keys.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| keys[i]);
        let mut values = vec![0.0f32; n * self.dim];
        let mut missing = vec![false; n];
        let mut acquired: Vec<u64> = Vec::with_capacity(n);
        let mut prev: Option<(u64, bool)> = None;
        for &i in &order {
            let key = keys[i];
            let res = match prev {
                Some((k, present)) if k == key => {
                    if present {
                        self.store.add_reader(key).map(Some)
                    } else {
                        Ok(None)
                    }
                }
                _ => first(&self.store, key),
            };
            let row = match res {
                Ok(r) => r,
                Err(e) => {
                    for &k in &acquired {
                        let _ = self.store.cancel_read(k);
                    }
                    return Err(e);
                }
            };
            match row {
                Some(v) => {
                    if v.len() != self.dim {
                        acquired.push(key);
                        for &k in &acquired {
                            let _ = self.store.cancel_read(k);
                        }
                        return Err(Error::DimMismatch {
                            expected: self.dim,
                            actual: v.len(),
                        });
                    }
                    values[i * self.dim..(i + 1) * self.dim].copy_from_slice(&v);
                    acquired.push(key);
                    prev = Some((key, true));
                }
                None => {
                    missing[i] = true;
                    prev = Some((key, false));
                }
            }
        }
        Ok(EmbeddingBatch {
            keys: features.to_vec(),
            dim: self.dim,
            values,
            missing,
        })
    }

    /// Current values without counting reads; absent rows are zero.
    pub fn peek_batch(&self, features: &[u64]) -> Result<EmbeddingBatch> {
        let keys = self.keys(features)?;
        let mut values = vec![0.0f32; keys.len() * self.dim];
        let mut missing = vec![false; keys.len()];
        for (i, &key) in keys.iter().enumerate() {
            match self.store.peek(key)? {
                Some(v) if v.len() == self.dim => values[i * self.dim..(i + 1) * self.dim].copy_from_slice(&v),
                Some(v) => {
                    return Err(Error::DimMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    })
                }
                None => missing[i] = true,
            }
        }
        Ok(EmbeddingBatch {
            keys: features.to_vec(),
            dim: self.dim,
            values,
            missing,
        })
    }

    /// Upserts one row per key. Keys must be distinct.
    pub fn put_batch(&self, features: &[u64], values: &[f32]) -> Result<()> {
        self.check_shape(features.len(), values)?;
        let keys = self.keys(features)?;
        let mut seen = HashSet::with_capacity(keys.len());
        for &f in features {
            if !seen.insert(f) {
                return Err(Error::DuplicateKey(f));
            }
        }
        for (i, &key) in keys.iter().enumerate() {
            let out = self.store.put(key, &values[i * self.dim..(i + 1) * self.dim])?;
            self.note(out);
        }
        Ok(())
    }

    /// Inserts rows for keys that do not exist yet; existing keys are kept.
    pub fn insert_batch_if_absent(&self, features: &[u64], values: &[f32]) -> Result<()> {
        self.check_shape(features.len(), values)?;
        for (i, &f) in features.iter().enumerate() {
            let out = self
                .store
                .insert_if_absent(self.key(f)?, &values[i * self.dim..(i + 1) * self.dim])?;
            self.note(out);
        }
        Ok(())
    }

    /// Plain SGD step: `value -= learning_rate * grad` for every row.
    pub fn rmw_batch(&self, features: &[u64], grads: &[f32], learning_rate: f32) -> Result<()> {
        self.check_shape(features.len(), grads)?;
        let keys = self.keys(features)?;
        let mut delta = vec![0.0f32; self.dim];
        for (i, &key) in keys.iter().enumerate() {
            for (d, g) in delta.iter_mut().zip(&grads[i * self.dim..(i + 1) * self.dim]) {
                *d = -learning_rate * g;
            }
            self.store.rmw(key, &delta)?;
        }
        Ok(())
    }

    /// Retracts one outstanding read per key.
    pub fn cancel_batch(&self, features: &[u64]) -> Result<()> {
        for &f in features {
            self.store.cancel_read(self.key(f)?)?;
        }
        Ok(())
    }

    pub fn lookahead_batch(&self, features: &[u64], dest: PrefetchDestination) -> Result<PrefetchToken> {
        let keys = self.keys(features)?;
        self.store.lookahead(&keys, dest)
    }
}
