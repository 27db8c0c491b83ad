//! Command-line driver. Exit codes: 0 success, 1 operational failure, 2 usage.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{self, Distribution, WorkloadSpec};
use crate::lockword::StalenessBound;
use crate::store::{manifest, Store, StoreConfig};
use crate::train::{self, DestKind, Sampler, SyntheticTaskSpec, TrainerConfig};

#[derive(Debug, Parser)]
#[command(name = "stalekv", version, about = "Bounded-staleness embedding store: benchmarks and training")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Store directory.
    #[arg(long, global = true, default_value = "stalekv-data")]
    pub data_dir: PathBuf,
    /// In-memory log size, e.g. `65536`, `64M`, `1G`.
    #[arg(long, global = true, default_value = "64M", value_parser = parse_size)]
    pub memory_budget: u64,
    /// Page and segment size.
    #[arg(long, global = true, default_value = "1M", value_parser = parse_size)]
    pub segment_size: u64,
    /// Worker threads (YCSB clients or trainer workers).
    #[arg(long, global = true, default_value_t = 8)]
    pub threads: usize,
    /// Staleness bound: a non-negative integer or `inf`.
    #[arg(long, global = true, default_value = "inf")]
    pub bound: StalenessBound,
    /// Future batches to prefetch while training; 0 disables lookahead.
    #[arg(long, global = true, default_value_t = 0)]
    pub lookahead_depth: usize,
    #[arg(long, global = true, value_enum, default_value_t = Dest::Store)]
    pub dest: Dest,
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Append report rows to this CSV file.
    #[arg(long, global = true)]
    pub csv_out: Option<PathBuf>,
    /// Run without the staleness gate and counters (baseline mode).
    #[arg(long, global = true)]
    pub no_staleness: bool,
    /// Emulated latency of each segment read, in microseconds.
    #[arg(long, global = true, default_value_t = 0)]
    pub io_latency_us: u64,
    /// Hash index buckets (power of two).
    #[arg(long, global = true, default_value_t = 1 << 20)]
    pub index_buckets: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dest {
    Store,
    Appcache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dist {
    Uniform,
    Zipfian,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Insert the YCSB records into an empty store and checkpoint it.
    Load(WorkloadArgs),
    /// Run the YCSB read/write mix against a loaded store.
    Run(WorkloadArgs),
    /// Train the toy CTR model on a generated dataset.
    Train(TrainArgs),
    /// Generate a synthetic dataset file.
    GenData(GenArgs),
    /// Checkpoint the store in the data directory.
    Checkpoint,
    /// Recover the store from a manifest and print a summary.
    Recover {
        /// Manifest to recover from; defaults to the newest one.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct WorkloadArgs {
    #[arg(long, default_value_t = 100_000)]
    pub records: u64,
    #[arg(long, default_value_t = 1_000_000)]
    pub ops: u64,
    #[arg(long, default_value_t = 0.5)]
    pub read_ratio: f64,
    #[arg(long, value_enum, default_value_t = Dist::Zipfian)]
    pub dist: Dist,
    #[arg(long, default_value_t = 0.99)]
    pub zipf_exponent: f64,
    #[arg(long, default_value_t = 16)]
    pub value_dim: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f32,
    #[arg(long, default_value_t = 1)]
    pub model_id: u32,
    /// Order samples by their first field instead of shuffling.
    #[arg(long)]
    pub partition_ordered: bool,
    /// Checkpoint the store after training.
    #[arg(long)]
    pub checkpoint: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated field cardinalities.
    #[arg(long, value_delimiter = ',', default_value = "100000,50000,10000,1000")]
    pub fields: Vec<u64>,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub dense_dim: usize,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 10_000)]
    pub holdout: usize,
    #[arg(long, default_value_t = 0.9)]
    pub skew: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
}

/// Parses sizes such as `4096`, `64K`, `64M`, `2G`.
pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, shift) = match s.char_indices().last() {
        Some((i, c)) if c.eq_ignore_ascii_case(&'k') => (&s[..i], 10),
        Some((i, c)) if c.eq_ignore_ascii_case(&'m') => (&s[..i], 20),
        Some((i, c)) if c.eq_ignore_ascii_case(&'g') => (&s[..i], 30),
        _ => (s, 0),
    };
    let n: u64 = num.parse().map_err(|_| format!("invalid size `{s}`"))?;
    n.checked_shl(shift)
        .filter(|v| v >> shift == n)
        .ok_or_else(|| format!("size `{s}` overflows"))
}

pub fn parse<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

impl GlobalArgs {
    pub fn store_config(&self) -> StoreConfig {
        let mut c = StoreConfig::new(&self.data_dir);
        c.memory_budget_bytes = self.memory_budget;
        c.segment_size_bytes = self.segment_size;
        c.index_buckets = self.index_buckets;
        c.staleness_enabled = !self.no_staleness;
        c.io_latency = Duration::from_micros(self.io_latency_us);
        c
    }
}

fn workload(g: &GlobalArgs, w: &WorkloadArgs) -> WorkloadSpec {
    WorkloadSpec {
        record_count: w.records,
        operation_count: w.ops,
        read_ratio: w.read_ratio,
        distribution: match w.dist {
            Dist::Uniform => Distribution::Uniform,
            Dist::Zipfian => Distribution::Zipfian(w.zipf_exponent),
        },
        value_dim: w.value_dim,
        threads: g.threads,
        bound: g.bound,
        staleness_enabled: !g.no_staleness,
        seed: g.seed,
    }
}

fn print_ycsb(g: &GlobalArgs, r: &bench::YcsbReport) -> anyhow::Result<()> {
    println!("{}", bench::YCSB_CSV_HEADER);
    println!("{}", bench::report::csv_row(r));
    if let Some(p) = &g.csv_out {
        bench::report::append_csv(p, r).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Load(w) => {
            let store = Store::open(g.store_config())?;
            let r = bench::ycsb_load(&store, &workload(g, w))?;
            store.checkpoint()?;
            print_ycsb(g, &r)
        }
        Command::Run(w) => {
            let store = Store::open(g.store_config())?;
            let r = bench::ycsb_run(&store, &workload(g, w))?;
            print_ycsb(g, &r)
        }
        Command::GenData(a) => {
            let spec = SyntheticTaskSpec {
                cardinalities: a.fields.clone(),
                dim: a.dim,
                dense_dim: a.dense_dim,
                skew: a.skew,
                num_samples: a.samples,
                holdout: a.holdout,
                noise: a.noise,
            };
            let ds = train::generate_dataset(&spec, g.seed, &a.out)?;
            let pos = ds.labels.iter().filter(|&&y| y == 1).count();
            println!(
                "wrote {} samples ({} holdout, {:.1}% positive), {} features, embedding footprint {} bytes",
                ds.len(),
                ds.holdout,
                100.0 * pos as f64 / ds.len().max(1) as f64,
                spec.total_features(),
                spec.embedding_bytes()
            );
            Ok(())
        }
        Command::Train(a) => {
            let ds = train::Dataset::read(&a.dataset)
                .with_context(|| format!("reading dataset {}", a.dataset.display()))?;
            let store = Store::open(g.store_config())?;
            let cfg = TrainerConfig {
                workers: g.threads,
                batch_size: a.batch_size,
                learning_rate: a.lr,
                bound: g.bound,
                epochs: a.epochs,
                lookahead_depth: g.lookahead_depth,
                dest: match g.dest {
                    Dest::Store => DestKind::Store,
                    Dest::Appcache => DestKind::AppCache,
                },
                seed: g.seed,
                sampler: if a.partition_ordered {
                    Sampler::PartitionOrdered
                } else {
                    Sampler::Shuffled
                },
                model_id: a.model_id,
                evaluate: true,
                record_trajectory: false,
            };
            let report = train::train(&store, &ds, &cfg)?;
            let label = train::RunLabel {
                bound: g.bound.to_string(),
                workers: g.threads,
                lookahead_depth: g.lookahead_depth,
            };
            println!("{}", train::METRICS_CSV_HEADER);
            for m in &report.metrics {
                println!("{}", m.csv_row(&label));
            }
            if let Some(p) = &g.csv_out {
                train::append_csv(p, &label, &report.metrics)?;
            }
            if a.checkpoint {
                store.checkpoint()?;
            }
            Ok(())
        }
        Command::Checkpoint => {
            let store = Store::open(g.store_config())?;
            let m = store.checkpoint()?;
            println!(
                "{}",
                g.data_dir.join(manifest::CheckpointManifest::file_name(m.manifest_id)).display()
            );
            Ok(())
        }
        Command::Recover { manifest: path } => {
            let store = match path {
                Some(p) => Store::recover(g.store_config(), p)?,
                None => {
                    if manifest::latest(&g.data_dir)?.is_none() {
                        anyhow::bail!("no manifest in {}", g.data_dir.display());
                    }
                    Store::open(g.store_config())?
                }
            };
            summarize(&store, &g.data_dir)
        }
    }
}

fn summarize(store: &Store, dir: &Path) -> anyhow::Result<()> {
    let records = store.scan()?;
    println!("data_dir: {}", dir.display());
    println!("records: {}", records.len());
    println!("digest: {:016x}", store.digest()?);
    for t in store.table_metas() {
        println!("table {}: dim {} keys {}", t.model_id, t.dim, t.key_count);
    }
    Ok(())
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match parse(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            1
        }
    }
}
