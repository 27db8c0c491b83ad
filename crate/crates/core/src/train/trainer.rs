//! Multi-worker asynchronous trainer.
//!
//! Each worker repeats: prefetch the keys of upcoming batches, read the
//! batch's embeddings through the staleness gate, run the toy model, update
//! its private dense replica, and apply the embedding gradients with one
//! read-modify-write per key. Dense replicas are averaged at epoch ends.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Barrier;
use std::time::Instant;

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lockword::StalenessBound;
use crate::prefetch::{AppCache, PrefetchDestination};
use crate::store::{Store, StoreStats};
use crate::tables::{split_key, TableHandle};
use crate::train::dataset::Dataset;
use crate::train::eval;
use crate::train::metrics::MetricsRecord;
use crate::train::model::ToyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DestKind {
    Store,
    AppCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampler {
    /// Seeded shuffle of the training samples every epoch.
    Shuffled,
    /// Samples ordered by their first field's id, so consecutive batches
    /// touch nearby keys.
    PartitionOrdered,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub workers: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub bound: StalenessBound,
    pub epochs: usize,
    /// Number of future batches whose keys are prefetched; 0 disables it.
    pub lookahead_depth: usize,
    pub dest: DestKind,
    pub seed: u64,
    pub sampler: Sampler,
    pub model_id: u32,
    /// Evaluate the holdout after every epoch.
    pub evaluate: bool,
    /// Snapshot all parameters after every epoch.
    pub record_trajectory: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            workers: 1,
            batch_size: 256,
            learning_rate: 0.1,
            bound: StalenessBound::INFINITY,
            epochs: 1,
            lookahead_depth: 0,
            dest: DestKind::Store,
            seed: 1,
            sampler: Sampler::Shuffled,
            model_id: 1,
            evaluate: true,
            record_trajectory: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.batch_size == 0 {
            return Err(Error::Config("workers and batch size must be positive".into()));
        }
        if !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be finite".into()));
        }
        Ok(())
    }
}

/// Parameters after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub w_nn: Vec<f32>,
    /// Sorted by feature id.
    pub embeddings: Vec<(u64, Vec<f32>)>,
}

impl TrajectoryPoint {
    /// Bitwise equality, so that `-0.0` and `0.0` differ and `NaN` equals itself.
    pub fn bit_eq(&self, other: &TrajectoryPoint) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.epoch == other.epoch
            && bits(&self.w_nn) == bits(&other.w_nn)
            && self.embeddings.len() == other.embeddings.len()
            && self
                .embeddings
                .iter()
                .zip(&other.embeddings)
                .all(|((ka, va), (kb, vb))| ka == kb && bits(va) == bits(vb))
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRecord>,
    pub w_nn: Vec<f32>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub samples: u64,
    /// Wall time spent in training epochs, excluding evaluation.
    pub train_seconds: f64,
    pub stats: StoreStats,
}

impl TrainReport {
    pub fn samples_per_second(&self) -> f64 {
        self.samples as f64 / self.train_seconds.max(1e-9)
    }

    pub fn final_auc(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.holdout_auc)
    }
}

pub fn model_of(ds: &Dataset) -> ToyModel {
    ToyModel {
        fields: ds.fields(),
        dim: ds.dim,
        dense_dim: ds.dense_dim,
    }
}

/// Training-sample batches of one epoch, in global order.
pub fn epoch_batches(ds: &Dataset, cfg: &TrainerConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..ds.train_len()).collect();
    match cfg.sampler {
        Sampler::Shuffled => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x100_0001).wrapping_add(epoch as u64));
            idx.shuffle(&mut rng);
        }
        Sampler::PartitionOrdered => idx.sort_by_key(|&i| ds.ids_of(i)[0]),
    }
    idx.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

/// Distinct keys of a batch and, per sample field, the index of its key.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub samples: Vec<usize>,
    pub keys: Vec<u64>,
    pub slots: Vec<usize>,
}

impl BatchPlan {
    pub fn new(ds: &Dataset, samples: Vec<usize>) -> Self {
        let mut keys: Vec<u64> = samples.iter().flat_map(|&s| ds.ids_of(s).iter().copied()).collect();
        keys.sort_unstable();
        keys.dedup();
        let pos: HashMap<u64, usize> = keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let slots = samples
            .iter()
            .flat_map(|&s| ds.ids_of(s).iter().map(|k| pos[k]).collect::<Vec<_>>())
            .collect();
        BatchPlan { samples, keys, slots }
    }
}

/// One SGD step on a batch: updates `w` in place and returns the loss sum and
/// the per-key embedding gradients (row-major `keys x dim`).
pub fn compute_step(
    model: &ToyModel,
    ds: &Dataset,
    plan: &BatchPlan,
    rows: &[f32],
    w: &mut [f32],
    lr: f32,
) -> (f64, Vec<f32>) {
    let (m, d) = (model.fields, model.dim);
    let scale = 1.0 / plan.samples.len() as f32;
    let mut grad_w = vec![0.0f32; w.len()];
    let mut key_grads = vec![0.0f32; plan.keys.len() * d];
    let mut emb = vec![0.0f32; m * d];
    let mut grad_emb = vec![0.0f32; m * d];
    let mut loss = 0.0f64;
    for (si, &s) in plan.samples.iter().enumerate() {
        for f in 0..m {
            let slot = plan.slots[si * m + f];
            emb[f * d..(f + 1) * d].copy_from_slice(&rows[slot * d..(slot + 1) * d]);
        }
        grad_emb.fill(0.0);
        let l = model.accumulate(w, &emb, ds.dense_of(s), ds.labels[s], scale, &mut grad_w, &mut grad_emb);
        loss += l as f64;
        for f in 0..m {
            let slot = plan.slots[si * m + f];
            for j in 0..d {
                key_grads[slot * d + j] += grad_emb[f * d + j];
            }
        }
    }
    for (wi, g) in w.iter_mut().zip(&grad_w) {
        *wi -= lr * g;
    }
    (loss, key_grads)
}

/// Holdout AUC and logloss with the current parameters. Keys never trained
/// use their initial value. Reads do not touch staleness counters.
pub fn evaluate_holdout(table: &TableHandle, ds: &Dataset, w: &[f32], seed: u64) -> Result<(f64, f64)> {
    let model = model_of(ds);
    let range = ds.holdout_range();
    if range.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut keys: Vec<u64> = range.clone().flat_map(|i| ds.ids_of(i).iter().copied()).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut table_rows: HashMap<u64, Vec<f32>> = HashMap::with_capacity(keys.len());
    for chunk in keys.chunks(4096) {
        let b = table.peek_batch(chunk)?;
        for (i, &k) in chunk.iter().enumerate() {
            let row = if b.missing[i] {
                model.init_embedding(seed, k)
            } else {
                b.row(i).to_vec()
            };
            table_rows.insert(k, row);
        }
    }
    let (m, d) = (model.fields, model.dim);
    let mut emb = vec![0.0f32; m * d];
    let logits: Vec<f64> = range
        .clone()
        .map(|i| {
            for (f, k) in ds.ids_of(i).iter().enumerate() {
                emb[f * d..(f + 1) * d].copy_from_slice(&table_rows[k]);
            }
            model.logit(w, &emb, ds.dense_of(i)) as f64
        })
        .collect();
    let labels = &ds.labels[range];
    Ok((eval::auc(&logits, labels)?, eval::logloss(&logits, labels)))
}

fn snapshot(table: &TableHandle, epoch: usize, w: &[f32]) -> Result<TrajectoryPoint> {
    let id = table.model_id();
    let embeddings = table
        .store()
        .scan()?
        .into_iter()
        .filter_map(|(k, v)| {
            let (model, feature) = split_key(k);
            (model == id).then_some((feature, v))
        })
        .collect();
    Ok(TrajectoryPoint {
        epoch,
        w_nn: w.to_vec(),
        embeddings,
    })
}

struct EpochShared {
    replicas: Vec<Vec<f32>>,
    loss: f64,
}

/// Trains the toy model on `ds` with parameters stored in `store`.
pub fn train(store: &Store, ds: &Dataset, cfg: &TrainerConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let model = model_of(ds);
    let table = store.open_model(cfg.model_id, ds.dim, cfg.bound)?;
    let w0 = model.init_nn(cfg.seed);
    let workers = cfg.workers;
    let shared = Mutex::new(EpochShared {
        replicas: vec![w0.clone(); workers],
        loss: 0.0,
    });
    let barrier = Barrier::new(workers);
    let failed = AtomicBool::new(false);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let report = Mutex::new(TrainReport {
        metrics: Vec::new(),
        w_nn: w0,
        trajectory: Vec::new(),
        samples: 0,
        train_seconds: 0.0,
        stats: StoreStats::default(),
    });
    let start = Instant::now();
    let stats_start = store.stats();
    let epoch_clock = Mutex::new((Instant::now(), stats_start.clone()));

    let fail = |e: Error| {
        failed.store(true, Ordering::SeqCst);
        first_error.lock().get_or_insert(e);
    };

    std::thread::scope(|sc| {
        for wid in 0..workers {
            let (table, shared, barrier, failed, report, epoch_clock, model) =
                (&table, &shared, &barrier, &failed, &report, &epoch_clock, &model);
            let fail = &fail;
            sc.spawn(move || {
                let mut w = shared.lock().replicas[wid].clone();
                for epoch in 0..cfg.epochs {
                    let plans: Vec<BatchPlan> = epoch_batches(ds, cfg, epoch)
                        .into_iter()
                        .skip(wid)
                        .step_by(workers)
                        .map(|b| BatchPlan::new(ds, b))
                        .collect();
                    let mut loss = 0.0;
                    let prefetch = |j: usize| -> Result<()> {
                        if let Some(p) = plans.get(j) {
                            let dest = match cfg.dest {
                                DestKind::Store => PrefetchDestination::StoreBuffer,
                                DestKind::AppCache => {
                                    PrefetchDestination::ApplicationCache(AppCache::new(p.keys.len(), table.dim()))
                                }
                            };
                            table.lookahead_batch(&p.keys, dest)?;
                        }
                        Ok(())
                    };
                    let mut run = || -> Result<()> {
                        if cfg.lookahead_depth > 0 {
                            for j in 1..=cfg.lookahead_depth {
                                prefetch(j)?;
                            }
                        }
                        for (j, plan) in plans.iter().enumerate() {
                            if failed.load(Ordering::Relaxed) {
                                return Ok(());
                            }
                            if cfg.lookahead_depth > 0 && j > 0 {
                                prefetch(j + cfg.lookahead_depth)?;
                            }
                            let batch = table.get_or_init_batch(&plan.keys, |k| model.init_embedding(cfg.seed, k))?;
                            let (l, grads) = compute_step(model, ds, plan, &batch.values, &mut w, cfg.learning_rate);
                            loss += l;
                            table.rmw_batch(&plan.keys, &grads, cfg.learning_rate)?;
                        }
                        Ok(())
                    };
                    if let Err(e) = run() {
                        fail(e);
                    }
                    {
                        let mut s = shared.lock();
                        s.replicas[wid] = w.clone();
                        s.loss += loss;
                    }
                    if barrier.wait().is_leader() {
                        let end = Instant::now();
                        if let Err(e) = finish_epoch(store, table, ds, cfg, epoch, shared, report, epoch_clock, start, end)
                        {
                            fail(e);
                        }
                        epoch_clock.lock().0 = Instant::now();
                    }
                    barrier.wait();
                    w = shared.lock().replicas[wid].clone();
                    if failed.load(Ordering::Relaxed) {
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner() {
        return Err(e);
    }
    let mut r = report.into_inner();
    r.w_nn = shared.into_inner().replicas.swap_remove(0);
    r.stats = store.stats().since(&stats_start);
    Ok(r)
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    store: &Store,
    table: &TableHandle,
    ds: &Dataset,
    cfg: &TrainerConfig,
    epoch: usize,
    shared: &Mutex<EpochShared>,
    report: &Mutex<TrainReport>,
    epoch_clock: &Mutex<(Instant, StoreStats)>,
    start: Instant,
    end: Instant,
) -> Result<()> {
    let (began, stats_before) = epoch_clock.lock().clone();
    let secs = end.duration_since(began).as_secs_f64();
    let stats = store.stats();
    let delta = stats.since(&stats_before);
    epoch_clock.lock().1 = stats;

    let mut s = shared.lock();
    if s.replicas.len() > 1 {
        let n = s.replicas.len() as f32;
        let mut avg = vec![0.0f32; s.replicas[0].len()];
        for r in &s.replicas {
            for (a, x) in avg.iter_mut().zip(r) {
                *a += x;
            }
        }
        for a in avg.iter_mut() {
            *a /= n;
        }
        for r in s.replicas.iter_mut() {
            r.clone_from(&avg);
        }
    }
    let w = s.replicas[0].clone();
    let samples = ds.train_len() as u64;
    let train_logloss = s.loss / samples.max(1) as f64;
    s.loss = 0.0;
    drop(s);

    let (auc, holdout_logloss) = if cfg.evaluate {
        evaluate_holdout(table, ds, &w, cfg.seed)?
    } else {
        (f64::NAN, f64::NAN)
    };
    let mut r = report.lock();
    r.samples += samples;
    r.train_seconds += secs;
    r.metrics.push(MetricsRecord {
        timestamp: start.elapsed().as_secs_f64(),
        epoch,
        samples,
        samples_per_second: samples as f64 / secs.max(1e-9),
        train_logloss,
        holdout_auc: auc,
        holdout_logloss,
        staleness_histogram: delta.staleness_histogram,
        disk_reads_per_sample: delta.disk_reads as f64 / samples.max(1) as f64,
        gate_waits: delta.gate_waits,
    });
    if cfg.record_trajectory {
        r.trajectory.push(snapshot(table, epoch, &w)?);
    }
    Ok(())
}
