//! YCSB-style load and run phases against a [`Store`].

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::report::Reservoir;
use crate::bench::zipf::Zipfian;
use crate::error::{Error, Result};
use crate::lockword::StalenessBound;
use crate::store::Store;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Distribution {
    Uniform,
    Zipfian(f64),
}

impl std::fmt::Display for Distribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Distribution::Uniform => write!(f, "uniform"),
            Distribution::Zipfian(t) => write!(f, "zipfian({t})"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub record_count: u64,
    pub operation_count: u64,
    pub read_ratio: f64,
    pub distribution: Distribution,
    pub value_dim: usize,
    pub threads: usize,
    pub bound: StalenessBound,
    /// Must match the store's configuration; recorded in reports.
    pub staleness_enabled: bool,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            record_count: 100_000,
            operation_count: 1_000_000,
            read_ratio: 0.5,
            distribution: Distribution::Zipfian(0.99),
            value_dim: 16,
            threads: 8,
            bound: StalenessBound::INFINITY,
            staleness_enabled: true,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.record_count == 0 || self.threads == 0 {
            return bad("record count and threads must be positive");
        }
        if !(0.0..=1.0).contains(&self.read_ratio) {
            return bad("read ratio must be in [0, 1]");
        }
        if let Distribution::Zipfian(t) = self.distribution {
            if !(t > 0.0 && t < 1.0) {
                return bad("zipfian exponent must be in (0, 1)");
            }
        }
        if self.value_dim == 0 || self.value_dim > crate::store::layout::MAX_DIM {
            return bad("value dimension out of range");
        }
        Ok(())
    }

    /// Number of reads the run phase issues.
    pub fn read_count(&self) -> u64 {
        (self.read_ratio * self.operation_count as f64).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct YcsbReport {
    pub op: &'static str,
    pub threads: usize,
    pub bound: StalenessBound,
    pub distribution: Distribution,
    pub staleness_enabled: bool,
    pub operations: u64,
    pub reads: u64,
    pub writes: u64,
    pub elapsed: Duration,
    pub p50_us: f64,
    pub p99_us: f64,
    pub gate_waits: u64,
    pub disk_reads: u64,
}

impl YcsbReport {
    pub fn throughput(&self) -> f64 {
        self.operations as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

fn value_for(seed: u64, key: u64, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Inserts keys `0..record_count` with seeded random values.
pub fn ycsb_load(store: &Store, spec: &WorkloadSpec) -> Result<YcsbReport> {
    spec.validate()?;
    if !store.is_empty() {
        return Err(Error::StoreNotEmpty);
    }
    let before = store.stats();
    let start = Instant::now();
    let n = spec.record_count;
    let t = spec.threads as u64;
    std::thread::scope(|sc| -> Result<()> {
        let handles: Vec<_> = (0..t)
            .map(|i| {
                sc.spawn(move || -> Result<()> {
                    for key in (i * n / t)..((i + 1) * n / t) {
                        store.put(key, &value_for(spec.seed, key, spec.value_dim))?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("load thread panicked")?;
        }
        Ok(())
    })?;
    let elapsed = start.elapsed();
    let d = store.stats().since(&before);
    Ok(YcsbReport {
        op: "load",
        threads: spec.threads,
        bound: spec.bound,
        distribution: spec.distribution,
        staleness_enabled: store.staleness_enabled(),
        operations: n,
        reads: 0,
        writes: n,
        elapsed,
        p50_us: f64::NAN,
        p99_us: f64::NAN,
        gate_waits: d.gate_waits,
        disk_reads: d.disk_reads,
    })
}

/// Marks exactly `reads` of `total` positions as reads (selection sampling).
pub fn op_mix(total: u64, reads: u64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e_55ed);
    let mut left = reads;
    (0..total)
        .map(|i| {
            let remaining = total - i;
            let pick = rng.gen_range(0..remaining) < left;
            if pick {
                left -= 1;
            }
            pick
        })
        .collect()
}

/// Runs the read/write mix and reports throughput and latency percentiles.
pub fn ycsb_run(store: &Store, spec: &WorkloadSpec) -> Result<YcsbReport> {
    spec.validate()?;
    if spec.staleness_enabled != store.staleness_enabled() {
        return Err(Error::Config(
            "workload and store disagree on the staleness machinery switch".into(),
        ));
    }
    let mix = op_mix(spec.operation_count, spec.read_count(), spec.seed);
    let zipf = match spec.distribution {
        Distribution::Zipfian(t) => Some(Zipfian::new(spec.record_count, t)),
        Distribution::Uniform => None,
    };
    let t = spec.threads as u64;
    let ops = spec.operation_count;
    let per_thread_samples = (1_000_000 / spec.threads).max(1);
    let before = store.stats();
    let start = Instant::now();
    let reservoirs = std::thread::scope(|sc| -> Result<Vec<Reservoir>> {
        let handles: Vec<_> = (0..t)
            .map(|i| {
                let (mix, zipf) = (&mix, &zipf);
                sc.spawn(move || -> Result<Reservoir> {
                    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i + 1));
                    let mut res = Reservoir::new(per_thread_samples, spec.seed ^ i);
                    let mut value = vec![0.0f32; spec.value_dim];
                    for &is_read in &mix[(i * ops / t) as usize..((i + 1) * ops / t) as usize] {
                        let key = match zipf {
                            Some(z) => z.next(&mut rng),
                            None => rng.gen_range(0..spec.record_count),
                        };
                        if !is_read {
                            for v in value.iter_mut() {
                                *v = rng.gen_range(-1.0..1.0);
                            }
                        }
                        let op_start = Instant::now();
                        if is_read {
                            store.get(key, spec.bound)?;
                        } else {
                            store.put(key, &value)?;
                        }
                        res.add(op_start.elapsed().as_nanos() as u64);
                    }
                    Ok(res)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect()
    })?;
    let elapsed = start.elapsed();
    let d = store.stats().since(&before);
    let merged = Reservoir::merge(reservoirs);
    let reads = spec.read_count();
    Ok(YcsbReport {
        op: "run",
        threads: spec.threads,
        bound: spec.bound,
        distribution: spec.distribution,
        staleness_enabled: store.staleness_enabled(),
        operations: ops,
        reads,
        writes: ops - reads,
        elapsed,
        p50_us: merged.percentile(0.50) / 1000.0,
        p99_us: merged.percentile(0.99) / 1000.0,
        gate_waits: d.gate_waits,
        disk_reads: d.disk_reads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::StoreConfig;

    fn store(dir: &std::path::Path, enabled: bool) -> Store {
        let mut c = StoreConfig::new(dir);
        c.memory_budget_bytes = 4 << 20;
        c.segment_size_bytes = 64 << 10;
        c.index_buckets = 1 << 14;
        c.io_contexts = 1;
        c.staleness_enabled = enabled;
        Store::open(c).unwrap()
    }

    fn spec() -> WorkloadSpec {
        WorkloadSpec {
            record_count: 10_000,
            operation_count: 20_000,
            threads: 4,
            ..WorkloadSpec::default()
        }
    }

    #[test]
    fn load_inserts_every_key() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path(), true);
        ycsb_load(&s, &spec()).unwrap();
        assert_eq!(s.scan().unwrap().len(), 10_000);
        assert!(matches!(ycsb_load(&s, &spec()), Err(Error::StoreNotEmpty)));
    }

    #[test]
    fn load_is_deterministic() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (a, b) = (store(d1.path(), true), store(d2.path(), true));
        ycsb_load(&a, &spec()).unwrap();
        ycsb_load(&b, &WorkloadSpec { threads: 3, ..spec() }).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn exact_read_count() {
        for (total, ratio) in [(1000u64, 0.5), (999, 0.33), (10, 1.0), (7, 0.0)] {
            let s = WorkloadSpec {
                operation_count: total,
                read_ratio: ratio,
                ..spec()
            };
            let mix = op_mix(total, s.read_count(), 5);
            let reads = mix.iter().filter(|&&r| r).count() as f64;
            assert!((reads - ratio * total as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn read_only_unbounded_never_waits() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path(), true);
        ycsb_load(&s, &spec()).unwrap();
        let r = ycsb_run(
            &s,
            &WorkloadSpec {
                read_ratio: 1.0,
                ..spec()
            },
        )
        .unwrap();
        assert_eq!(r.gate_waits, 0);
        assert_eq!(r.reads, 20_000);
        assert!(r.p50_us <= r.p99_us);
    }

    #[test]
    fn baseline_mode_runs() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path(), false);
        let sp = WorkloadSpec {
            staleness_enabled: false,
            distribution: Distribution::Uniform,
            ..spec()
        };
        ycsb_load(&s, &sp).unwrap();
        let r = ycsb_run(&s, &sp).unwrap();
        assert!(!r.staleness_enabled);
        assert!(matches!(ycsb_run(&s, &spec()), Err(Error::Config(_))));
    }
}
