use super::*;
use crate::lockword::StalenessBound;
use crate::store::{Store, StoreConfig};
use crate::train::model::max_relative_error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn store(dir: &std::path::Path) -> Store {
    let mut c = StoreConfig::new(dir);
    c.memory_budget_bytes = 256 << 10;
    c.segment_size_bytes = 32 << 10;
    c.index_buckets = 1 << 12;
    c.io_contexts = 2;
    c.trace_reads = true;
    Store::open(c).unwrap()
}

fn task() -> Dataset {
    let mut s = SyntheticTaskSpec::new(vec![300, 200, 50], 4, 3000);
    s.holdout = 1000;
    synthesize(&s, 21).unwrap()
}

#[test]
fn single_worker_bsp_matches_serial_reference() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = StoreConfig::new(dir.path());
    c.memory_budget_bytes = 64 << 10;
    c.segment_size_bytes = 32 << 10;
    c.index_buckets = 1 << 12;
    c.io_contexts = 2;
    let s = Store::open(c).unwrap();
    let mut spec = SyntheticTaskSpec::new(vec![3000, 2000, 500], 4, 3000);
    spec.holdout = 0;
    let ds = synthesize(&spec, 21).unwrap();
    let cfg = TrainerConfig {
        bound: StalenessBound::BSP,
        epochs: 3,
        batch_size: 64,
        record_trajectory: true,
        evaluate: false,
        ..TrainerConfig::default()
    };
    let run = train(&s, &ds, &cfg).unwrap();
    let reference = serial_reference(&ds, &cfg).unwrap();
    assert_eq!(run.trajectory.len(), 3);
    for (a, b) in run.trajectory.iter().zip(&reference) {
        assert!(a.bit_eq(b), "epoch {} diverged", a.epoch);
    }
    assert!(s.stats().flushed_pages > 0, "task should exceed memory");
}

#[test]
fn zero_learning_rate_keeps_embeddings() {
    let ds = task();
    let cfg = TrainerConfig {
        learning_rate: 0.0,
        epochs: 2,
        ..TrainerConfig::default()
    };
    let r = serial_reference(&ds, &cfg).unwrap();
    let m = trainer::model_of(&ds);
    for (k, v) in &r[1].embeddings {
        assert_eq!(*v, m.init_embedding(cfg.seed, *k));
    }
}

#[test]
fn unbounded_workers_never_wait_at_the_gate() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let ds = task();
    let cfg = TrainerConfig {
        workers: 8,
        bound: StalenessBound::INFINITY,
        batch_size: 32,
        evaluate: false,
        ..TrainerConfig::default()
    };
    let r = train(&s, &ds, &cfg).unwrap();
    assert_eq!(r.stats.gate_waits, 0);
}

#[test]
fn counters_are_zero_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let ds = task();
    for bound in [0u64, 2] {
        let cfg = TrainerConfig {
            workers: 4,
            bound: StalenessBound(bound),
            batch_size: 32,
            lookahead_depth: 2,
            evaluate: false,
            ..TrainerConfig::default()
        };
        train(&s, &ds, &cfg).unwrap();
        for (k, _) in s.scan().unwrap() {
            assert_eq!(s.staleness_of(k).unwrap(), Some(0));
        }
        assert!(s.take_read_trace().iter().all(|t| t.bound.admits(t.pre_staleness)));
    }
}

#[test]
fn training_learns_signal() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let ds = task();
    let cfg = TrainerConfig {
        workers: 2,
        epochs: 4,
        batch_size: 32,
        learning_rate: 0.5,
        ..TrainerConfig::default()
    };
    let r = train(&s, &ds, &cfg).unwrap();
    assert_eq!(r.metrics.len(), 4);
    assert!(r.final_auc() > 0.7, "auc {}", r.final_auc());
    assert!(r.metrics[3].train_logloss < r.metrics[0].train_logloss);
}

#[test]
fn appcache_and_partition_sampler_run() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let ds = task();
    let cfg = TrainerConfig {
        workers: 2,
        lookahead_depth: 3,
        dest: DestKind::AppCache,
        sampler: Sampler::PartitionOrdered,
        evaluate: false,
        ..TrainerConfig::default()
    };
    let r = train(&s, &ds, &cfg).unwrap();
    assert_eq!(r.samples, ds.train_len() as u64);
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let ds = task();
    let m = trainer::model_of(&ds);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in 0..20 {
        let w: Vec<f64> = (0..m.nn_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let emb: Vec<f64> = (0..m.fields * m.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dense: Vec<f64> = ds.dense_of(s).iter().map(|&x| x as f64).collect();
        let y = ds.labels[s];
        let mut gw = vec![0.0; w.len()];
        let mut ge = vec![0.0; emb.len()];
        m.accumulate(&w, &emb, &dense, y, 1.0, &mut gw, &mut ge);
        let (nw, ne) = m.numeric_gradient(&w, &emb, &dense, y, 1e-5);
        assert!(max_relative_error(&gw, &nw, 1e-6) < 1e-4);
        assert!(max_relative_error(&ge, &ne, 1e-6) < 1e-4);
    }
}

#[test]
fn holdout_evaluation_without_holdout() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let mut spec = SyntheticTaskSpec::new(vec![10], 2, 100);
    spec.holdout = 0;
    let ds = synthesize(&spec, 1).unwrap();
    let t = s.open_model(1, 2, StalenessBound::INFINITY).unwrap();
    let (a, l) = evaluate_holdout(&t, &ds, &trainer::model_of(&ds).init_nn(1), 1).unwrap();
    assert!(a.is_nan() && l.is_nan());
}
