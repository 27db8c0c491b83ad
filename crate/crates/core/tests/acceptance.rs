//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 4 5`.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stalekv::lockword::{self, AcquireOutcome, LockWord};
use stalekv::store::manifest;
use stalekv::train::{
    self, serial_reference, synthesize, Dataset, SyntheticTaskSpec, TrainReport, TrainerConfig,
};
use stalekv::{AppCache, Error, PrefetchDestination, StalenessBound, Store, StoreConfig};

const CHILD_ENV: &str = "STALEKV_ACCEPTANCE_CRASH_DIR";

struct Outcome {
    pass: bool,
    detail: String,
}

/// Number, name, time limit in seconds, check.
type Criterion = (usize, &'static str, u64, fn() -> Outcome);

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    if let Ok(dir) = std::env::var(CHILD_ENV) {
        crash_child(Path::new(&dir));
    }
    let wanted: HashSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 9] = [
        (1, "staleness gate soundness", 120, gate_soundness),
        (2, "lock-word model check", 10, lock_word_model_check),
        (3, "synchronous training matches serial reference", 120, bsp_equivalence),
        (4, "staleness bound trades accuracy for throughput", 900, staleness_tradeoff),
        (5, "lookahead raises throughput and cuts disk reads", 600, lookahead_effect),
        (6, "staleness machinery overhead on YCSB", 300, ycsb_overhead),
        (7, "prefetch transparency", 120, prefetch_transparency),
        (8, "durability across a hard kill", 120, durability),
        (9, "gradient check", 30, gradient_check),
    ];
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let out = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            check(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs < limit as f64;
        let pass = out.pass && in_time;
        if !pass {
            failed += 1;
        }
        let timing = if in_time {
            format!("{secs:.1}s")
        } else {
            format!("{secs:.1}s exceeds {limit}s")
        };
        println!(
            "{} criterion {n} ({name}): {} [{timing}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1

fn gate_soundness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut c = StoreConfig::new(dir.path());
    c.memory_budget_bytes = 512 << 10;
    c.segment_size_bytes = 64 << 10;
    c.index_buckets = 1 << 14;
    c.trace_reads = true;
    let s = Store::open(c).unwrap();
    let keys = 10_000u64;
    for k in 0..keys {
        s.put(k, &[0.0; 8]).unwrap();
    }
    let threads = 8u64;
    let pairs = 62_500u64;
    let mut total_ops = 0;
    let mut problems = Vec::new();
    for bound in [0u64, 1, 4, 16] {
        let bound = StalenessBound(bound);
        std::thread::scope(|sc| {
            for t in 0..threads {
                let s = &s;
                sc.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(t * 7919 + bound.0);
                    for _ in 0..pairs {
                        let k = rng.gen_range(0..keys);
                        s.get(k, bound).unwrap();
                        s.rmw(k, &[1.0; 8]).unwrap();
                    }
                });
            }
        });
        total_ops += 2 * threads * pairs;
        let trace = s.take_read_trace();
        let violations = trace.iter().filter(|r| !r.bound.admits(r.pre_staleness)).count();
        if trace.len() as u64 != threads * pairs || violations > 0 {
            problems.push(format!("bound {bound}: {} traced, {violations} violations", trace.len()));
        }
        let nonzero = (0..keys).filter(|&k| s.staleness_of(k).unwrap() != Some(0)).count();
        if nonzero > 0 {
            problems.push(format!("bound {bound}: {nonzero} counters nonzero"));
        }
    }
    let sum: f64 = s.scan().unwrap().iter().map(|(_, v)| v[0] as f64).sum();
    if sum != (4 * threads * pairs) as f64 {
        problems.push(format!("lost updates: sum {sum}"));
    }
    if s.stats().audit_violations != 0 {
        problems.push("store audit counter nonzero".into());
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{total_ops} ops over bounds 0,1,4,16; 0 violations; all counters 0")
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------
// 2

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Op {
    Read(StalenessBound),
    Write,
    AddReader,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Phase {
    Load,
    Cas { expected: u64, new: u64 },
    Critical,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
struct Thread {
    pc: u8,
    phase: Phase,
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
struct State {
    word: u64,
    threads: [Thread; 2],
    /// Lock acquisitions that have been released so far.
    released: u32,
}

struct Explorer<'a> {
    programs: [&'a [Op]; 2],
    visited: HashSet<State>,
    error: Option<String>,
}

impl Explorer<'_> {
    fn invariant(&self, s: &State) -> Result<(), String> {
        let w = LockWord(s.word);
        let critical = s.threads.iter().filter(|t| t.phase == Phase::Critical).count();
        if critical > 1 {
            return Err(format!("two threads hold the lock: {s:?}"));
        }
        if w.locked() != (critical == 1) {
            return Err(format!("lock bit disagrees with holders: {s:?}"));
        }
        if w.generation() != s.released {
            return Err(format!("generation {} after {} releases", w.generation(), s.released));
        }
        for (i, t) in s.threads.iter().enumerate() {
            if t.phase == Phase::Critical {
                if let Op::Read(b) = self.programs[i][t.pc as usize] {
                    if !b.is_infinite() && w.staleness() as u64 > b.0 + 1 {
                        return Err(format!("staleness {} above bound {b} + 1 while reading", w.staleness()));
                    }
                }
            }
        }
        Ok(())
    }

    fn step(&self, s: &State, i: usize) -> Result<Option<State>, String> {
        let t = s.threads[i];
        let Some(&op) = self.programs[i].get(t.pc as usize) else {
            return Ok(None);
        };
        let mut n = s.clone();
        let cur = LockWord(s.word);
        match t.phase {
            Phase::Load => {
                let outcome = match op {
                    Op::Read(b) => lockword::try_acquire_read(cur, b).map_err(|e| e.to_string())?,
                    Op::Write => lockword::try_acquire_write(cur),
                    Op::AddReader => lockword::try_add_reader(cur).map_err(|e| e.to_string())?,
                };
                match outcome {
                    AcquireOutcome::Acquired(new) => {
                        n.threads[i].phase = Phase::Cas { expected: s.word, new: new.0 };
                    }
                    AcquireOutcome::WaitLocked | AcquireOutcome::WaitStaleness(_) => return Ok(None),
                    AcquireOutcome::RetryAddressChanged => return Err("replaced bit appeared".into()),
                }
            }
            Phase::Cas { expected, new } => {
                if s.word != expected {
                    n.threads[i].phase = Phase::Load;
                } else {
                    if let Op::Read(b) = op {
                        if !b.admits(cur.staleness()) {
                            return Err(format!("read admitted at staleness {} over bound {b}", cur.staleness()));
                        }
                    }
                    n.word = new;
                    if LockWord(new).locked() {
                        n.threads[i].phase = Phase::Critical;
                    } else {
                        n.threads[i] = Thread { pc: t.pc + 1, phase: Phase::Load };
                    }
                }
            }
            Phase::Critical => {
                n.word = lockword::release(cur).map_err(|e| e.to_string())?.0;
                n.released += 1;
                n.threads[i] = Thread { pc: t.pc + 1, phase: Phase::Load };
            }
        }
        Ok(Some(n))
    }

    fn explore(&mut self, s: State) {
        if self.error.is_some() || !self.visited.insert(s.clone()) {
            return;
        }
        if let Err(e) = self.invariant(&s) {
            self.error = Some(e);
            return;
        }
        for i in 0..2 {
            match self.step(&s, i) {
                Ok(Some(n)) => self.explore(n),
                Ok(None) => {}
                Err(e) => {
                    self.error = Some(format!("{e} in {s:?}"));
                    return;
                }
            }
        }
    }
}

fn lock_word_model_check() -> Outcome {
    let alphabet = [
        Op::Read(StalenessBound(0)),
        Op::Read(StalenessBound(1)),
        Op::Read(StalenessBound::INFINITY),
        Op::Write,
        Op::AddReader,
    ];
    let mut programs = Vec::new();
    for a in alphabet {
        for b in alphabet {
            for c in alphabet {
                programs.push([a, b, c]);
            }
        }
    }
    let mut states = 0usize;
    let mut runs = 0usize;
    for initial in [0u64, 1, 2] {
        for p in &programs {
            for q in &programs {
                let mut ex = Explorer { programs: [p, q], visited: HashSet::new(), error: None };
                let t = Thread { pc: 0, phase: Phase::Load };
                ex.explore(State { word: initial, threads: [t, t], released: 0 });
                if let Some(e) = ex.error {
                    return check(false, format!("{p:?} vs {q:?} from staleness {initial}: {e}"));
                }
                states += ex.visited.len();
                runs += 1;
            }
        }
    }
    check(
        true,
        format!("{runs} program pairs, {states} reachable states; mutual exclusion and gate hold"),
    )
}

// ---------------------------------------------------------------------------
// 3

fn bsp_equivalence() -> Outcome {
    let mut spec = SyntheticTaskSpec::new(vec![20_000, 10_000, 2_000, 200], 8, 100_000);
    spec.holdout = 0;
    let ds = synthesize(&spec, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut c = StoreConfig::new(dir.path());
    c.memory_budget_bytes = 512 << 10;
    c.segment_size_bytes = 64 << 10;
    c.index_buckets = 1 << 16;
    let s = Store::open(c).unwrap();
    let cfg = TrainerConfig {
        workers: 1,
        bound: StalenessBound::BSP,
        epochs: 5,
        batch_size: 256,
        evaluate: false,
        record_trajectory: true,
        ..TrainerConfig::default()
    };
    let run = train::train(&s, &ds, &cfg).unwrap();
    let reference = serial_reference(&ds, &cfg).unwrap();
    let diverged: Vec<usize> = run
        .trajectory
        .iter()
        .zip(&reference)
        .filter(|(a, b)| !a.bit_eq(b))
        .map(|(a, _)| a.epoch)
        .collect();
    let ok = run.trajectory.len() == 5 && reference.len() == 5 && diverged.is_empty();
    check(
        ok,
        format!(
            "5 epochs x {} samples, {} embeddings, {} pages flushed; diverged epochs {diverged:?}",
            ds.train_len(),
            reference[4].embeddings.len(),
            s.stats().flushed_pages
        ),
    )
}

// ---------------------------------------------------------------------------
// 4 and 5: larger-than-memory training

const BUDGET: u64 = 4 << 20;
const IO_LATENCY: Duration = Duration::from_micros(200);

fn big_task() -> (SyntheticTaskSpec, Dataset) {
    let mut spec = SyntheticTaskSpec::new(vec![200_000, 100_000, 20_000, 2_000], 16, 60_000);
    spec.holdout = 10_000;
    let ds = synthesize(&spec, 11).unwrap();
    (spec, ds)
}

/// Fresh store holding every embedding of the task, initialised as the
/// trainer would, so the on-disk footprint exceeds the memory budget.
fn loaded_store(dir: &Path, spec: &SyntheticTaskSpec, cfg: &TrainerConfig) -> Store {
    let mut c = StoreConfig::new(dir);
    c.memory_budget_bytes = BUDGET;
    c.segment_size_bytes = 256 << 10;
    c.index_buckets = 1 << 20;
    c.io_latency = IO_LATENCY;
    let s = Store::open(c).unwrap();
    let model = stalekv::train::ToyModel { fields: spec.fields(), dim: spec.dim, dense_dim: spec.dense_dim };
    let t = s.open_model(cfg.model_id, spec.dim, cfg.bound).unwrap();
    let n = spec.total_features();
    let chunk = 4096u64;
    let mut f = 0;
    while f < n {
        let keys: Vec<u64> = (f..(f + chunk).min(n)).collect();
        let vals: Vec<f32> = keys
            .iter()
            .flat_map(|&k| model.init_embedding(cfg.seed, t.key(k).unwrap()))
            .collect();
        t.insert_batch_if_absent(&keys, &vals).unwrap();
        f += chunk;
    }
    s.evict_all().unwrap();
    s
}

fn train_loaded(spec: &SyntheticTaskSpec, ds: &Dataset, cfg: &TrainerConfig) -> TrainReport {
    let dir = tempfile::tempdir().unwrap();
    let s = loaded_store(dir.path(), spec, cfg);
    train::train(&s, ds, cfg).unwrap()
}

fn big_config(bound: StalenessBound) -> TrainerConfig {
    TrainerConfig {
        workers: 8,
        batch_size: 128,
        learning_rate: 0.2,
        bound,
        epochs: 2,
        evaluate: true,
        ..TrainerConfig::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn staleness_tradeoff() -> Outcome {
    let (spec, ds) = big_task();
    let footprint = spec.embedding_bytes();
    let bounds = [
        StalenessBound(0),
        StalenessBound(4),
        StalenessBound(16),
        StalenessBound(64),
        StalenessBound::INFINITY,
    ];
    let mut tput = Vec::new();
    let mut aucs = Vec::new();
    for &b in &bounds {
        let runs: Vec<TrainReport> = (0..3).map(|_| train_loaded(&spec, &ds, &big_config(b))).collect();
        tput.push(median(runs.iter().map(|r| r.samples as f64 / r.train_seconds).collect()));
        aucs.push(median(runs.iter().map(|r| r.final_auc()).collect()));
    }
    let mut problems = Vec::new();
    if footprint < 4 * BUDGET {
        problems.push(format!("footprint {footprint} below 4x budget"));
    }
    for i in 1..bounds.len() {
        if tput[i] < 0.95 * tput[i - 1] {
            problems.push(format!("throughput drops from bound {} to {}", bounds[i - 1], bounds[i]));
        }
    }
    let speedup = tput[4] / tput[0];
    if speedup < 2.0 {
        problems.push(format!("inf speedup {speedup:.2} below 2"));
    }
    for i in 1..3 {
        let rel = (aucs[i] - aucs[0]).abs() / aucs[0];
        if rel.is_nan() || rel > 0.01 {
            problems.push(format!("auc at bound {} off by {:.2}%", bounds[i], 100.0 * rel));
        }
    }
    let table: Vec<String> = bounds
        .iter()
        .zip(tput.iter().zip(&aucs))
        .map(|(b, (t, a))| format!("{b}: {t:.0}/s auc {a:.4}"))
        .collect();
    check(
        problems.is_empty(),
        format!(
            "footprint {:.1}x budget; {}; inf/0 = {speedup:.2}x{}",
            footprint as f64 / BUDGET as f64,
            table.join(", "),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn lookahead_effect() -> Outcome {
    let (spec, ds) = big_task();
    let run = |depth: usize| {
        let cfg = TrainerConfig {
            lookahead_depth: depth,
            epochs: 1,
            evaluate: false,
            ..big_config(StalenessBound(4))
        };
        let r = train_loaded(&spec, &ds, &cfg);
        (r.samples as f64 / r.train_seconds, r.metrics[0].disk_reads_per_sample)
    };
    let mut base = Vec::new();
    let mut ahead = Vec::new();
    for _ in 0..3 {
        base.push(run(0));
        ahead.push(run(8));
    }
    let t0 = median(base.iter().map(|x| x.0).collect());
    let t8 = median(ahead.iter().map(|x| x.0).collect());
    let d0 = median(base.iter().map(|x| x.1).collect());
    let d8 = median(ahead.iter().map(|x| x.1).collect());
    let speedup = t8 / t0;
    let cut = 1.0 - d8 / d0;
    check(
        speedup >= 1.2 && cut >= 0.30,
        format!(
            "depth 0: {t0:.0}/s {d0:.3} disk reads/sample; depth 8: {t8:.0}/s {d8:.3}; speedup {speedup:.2}x, reads cut {:.0}%",
            100.0 * cut
        ),
    )
}

// ---------------------------------------------------------------------------
// 6

fn ycsb_overhead() -> Outcome {
    use stalekv::bench::{ycsb_load, ycsb_run, Distribution, WorkloadSpec};
    let mut lines = Vec::new();
    let mut ok = true;
    for (dist, limit) in [(Distribution::Uniform, 0.15), (Distribution::Zipfian(0.99), 0.25)] {
        let mut rates = [Vec::new(), Vec::new()];
        for trial in 0..5 {
            for (i, enabled) in [true, false].into_iter().enumerate() {
                let dir = tempfile::tempdir().unwrap();
                let mut c = StoreConfig::new(dir.path());
                c.staleness_enabled = enabled;
                c.index_buckets = 1 << 18;
                let s = Store::open(c).unwrap();
                let spec = WorkloadSpec {
                    record_count: 100_000,
                    operation_count: 400_000,
                    read_ratio: 0.5,
                    distribution: dist,
                    threads: 8,
                    bound: StalenessBound::INFINITY,
                    staleness_enabled: enabled,
                    seed: 100 + trial,
                    ..WorkloadSpec::default()
                };
                ycsb_load(&s, &spec).unwrap();
                rates[i].push(ycsb_run(&s, &spec).unwrap().throughput());
            }
        }
        let on = median(rates[0].clone());
        let off = median(rates[1].clone());
        let gap = (off - on) / off;
        ok &= gap < limit;
        lines.push(format!(
            "{dist}: enabled {on:.0} ops/s, disabled {off:.0} ops/s, gap {:.1}% (limit {:.0}%)",
            100.0 * gap,
            100.0 * limit
        ));
    }
    check(ok, lines.join("; "))
}

// ---------------------------------------------------------------------------
// 7

fn transparency_store(dir: &Path) -> Store {
    let mut c = StoreConfig::new(dir);
    c.memory_budget_bytes = 128 << 10;
    c.segment_size_bytes = 32 << 10;
    c.index_buckets = 1 << 12;
    c.io_contexts = 4;
    Store::open(c).unwrap()
}

fn prefetch_transparency() -> Outcome {
    let histories = 8;
    let ops = 20_000;
    let keys = 3_000u64;
    let mut mismatches = Vec::new();
    let mut prefetched = 0u64;
    for h in 0..histories {
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (a, b) = (transparency_store(da.path()), transparency_store(db.path()));
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let mut side = ChaCha8Rng::seed_from_u64(h ^ 0xdead);
        let mut tokens = Vec::new();
        for i in 0..ops {
            if side.gen_bool(0.1) {
                let ks: Vec<u64> = (0..side.gen_range(1..32)).map(|_| side.gen_range(0..keys)).collect();
                let dest = if side.gen_bool(0.5) {
                    PrefetchDestination::StoreBuffer
                } else {
                    PrefetchDestination::ApplicationCache(AppCache::new(ks.len(), 4))
                };
                tokens.push(b.lookahead(&ks, dest).unwrap());
                prefetched += ks.len() as u64;
                if side.gen_bool(0.2) {
                    if let Some(t) = tokens.pop() {
                        b.wait(&t).unwrap();
                    }
                }
            }
            let k = rng.gen_range(0..keys);
            let bound = StalenessBound(rng.gen_range(0..3));
            match rng.gen_range(0..4) {
                0 => {
                    let v = [i as f32, k as f32, 1.0, -1.0];
                    a.put(k, &v).unwrap();
                    b.put(k, &v).unwrap();
                }
                1 => {
                    let d = [rng.gen_range(-1.0..1.0); 4];
                    let (ra, rb) = (a.rmw(k, &d), b.rmw(k, &d));
                    if ra.is_ok() != rb.is_ok() {
                        mismatches.push(format!("history {h} op {i}: rmw outcome differs"));
                    }
                }
                _ => {
                    let (ra, rb) = (try_get(&a, k, bound), try_get(&b, k, bound));
                    if ra != rb {
                        mismatches.push(format!("history {h} op {i}: get {k} gave {ra:?} vs {rb:?}"));
                    }
                    if let Some(Some(_)) = ra {
                        a.rmw(k, &[0.0; 4]).unwrap();
                        b.rmw(k, &[0.0; 4]).unwrap();
                    }
                }
            }
            if a.staleness_of(k).unwrap() != b.staleness_of(k).unwrap() {
                mismatches.push(format!("history {h} op {i}: staleness of {k} differs"));
            }
        }
        for t in tokens {
            b.wait(&t).unwrap();
        }
        a.checkpoint().unwrap();
        b.checkpoint().unwrap();
        if a.digest().unwrap() != b.digest().unwrap() {
            mismatches.push(format!("history {h}: checkpoint digests differ"));
        }
        if mismatches.len() > 5 {
            break;
        }
    }
    check(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{histories} paired histories of {ops} ops with {prefetched} prefetched keys; identical gets and digests")
        } else {
            mismatches.join("; ")
        },
    )
}

/// `None` when the gate would block: the key was read and not yet written.
fn try_get(s: &Store, k: u64, bound: StalenessBound) -> Option<Option<Vec<f32>>> {
    match s.staleness_of(k).unwrap() {
        Some(st) if !bound.admits(st) => None,
        _ => Some(match s.get(k, bound) {
            Ok(v) => Some(v),
            Err(Error::NotFound) => None,
            Err(e) => panic!("{e}"),
        }),
    }
}

// ---------------------------------------------------------------------------
// 8

const CRASH_KEYS: u64 = 20_000;

fn crash_value(k: u64) -> Vec<f32> {
    vec![k as f32, (k * 3) as f32 + 0.5, -(k as f32), 7.0]
}

fn crash_config(dir: &Path) -> StoreConfig {
    let mut c = StoreConfig::new(dir);
    c.memory_budget_bytes = 256 << 10;
    c.segment_size_bytes = 32 << 10;
    c.index_buckets = 1 << 15;
    c
}

/// Child side: acknowledged puts, a checkpoint, more writes, then a hard kill.
fn crash_child(dir: &Path) -> ! {
    let s = Store::open(crash_config(dir)).unwrap();
    for k in 0..CRASH_KEYS {
        s.put(k, &crash_value(k)).unwrap();
    }
    s.checkpoint().unwrap();
    for k in 0..1000 {
        s.put(CRASH_KEYS + k, &[1.0; 4]).unwrap();
        s.rmw(k, &[100.0; 4]).unwrap();
    }
    std::process::abort();
}

fn durability() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(std::env::current_exe().unwrap())
        .env(CHILD_ENV, dir.path())
        .status()
        .unwrap();
    if status.success() {
        return check(false, "child exited cleanly instead of being killed");
    }
    let s = match Store::open(crash_config(dir.path())) {
        Ok(s) => s,
        Err(e) => return check(false, format!("recovery failed: {e}")),
    };
    let retained = (0..CRASH_KEYS)
        .filter(|&k| s.peek(k).unwrap().as_deref() == Some(&crash_value(k)[..]))
        .count() as u64;
    drop(s);

    let (_, m) = manifest::latest(dir.path()).unwrap().unwrap();
    let seg = dir.path().join(&m.segment_files[m.segment_files.len() / 2]);
    let mut bytes = std::fs::read(&seg).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&seg, bytes).unwrap();
    let detected = matches!(Store::open(crash_config(dir.path())), Err(Error::ChecksumMismatch(_)));
    check(
        retained == CRASH_KEYS && detected,
        format!(
            "child {status}; {retained}/{CRASH_KEYS} acknowledged puts recovered; corrupted segment {}",
            if detected { "rejected" } else { "NOT detected" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 9

fn gradient_check() -> Outcome {
    let mut spec = SyntheticTaskSpec::new(vec![1000, 500, 100], 8, 2000);
    spec.holdout = 0;
    let ds = synthesize(&spec, 9).unwrap();
    let m = train::model_of(&ds);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for s in 0..100 {
        let w: Vec<f64> = (0..m.nn_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let emb: Vec<f64> = (0..m.fields * m.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dense: Vec<f64> = ds.dense_of(s).iter().map(|&x| x as f64).collect();
        let y = ds.labels[s];
        let mut gw = vec![0.0; w.len()];
        let mut ge = vec![0.0; emb.len()];
        m.accumulate(&w, &emb, &dense, y, 1.0, &mut gw, &mut ge);
        let (nw, ne) = m.numeric_gradient(&w, &emb, &dense, y, 1e-5);
        worst = worst
            .max(train::max_relative_error(&gw, &nw, 1e-6))
            .max(train::max_relative_error(&ge, &ne, 1e-6));
    }
    check(worst < 1e-4, format!("100 samples, max relative error {worst:.2e}"))
}
