use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::ycsb::YcsbReport;
use crate::error::Result;

pub const YCSB_CSV_HEADER: &str = "ts,op,threads,bound,dist,throughput_ops,p50_us,p99_us,gate_waits,disk_reads";

/// Uniform sample of at most `cap` latencies (Vitter's algorithm R).
#[derive(Debug, Clone)]
pub struct Reservoir {
    cap: usize,
    seen: u64,
    samples: Vec<u64>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    pub fn new(cap: usize, seed: u64) -> Self {
        Reservoir {
            cap,
            seen: 0,
            samples: Vec::with_capacity(cap.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, v: u64) {
        self.seen += 1;
        if self.samples.len() < self.cap {
            self.samples.push(v);
        } else {
            let j = self.rng.gen_range(0..self.seen);
            if (j as usize) < self.cap {
                self.samples[j as usize] = v;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn merge(parts: Vec<Reservoir>) -> Reservoir {
        let cap = parts.iter().map(|p| p.cap).sum();
        let mut out = Reservoir::new(cap, 0);
        for p in parts {
            out.seen += p.seen;
            out.samples.extend(p.samples);
        }
        out.samples.sort_unstable();
        out
    }

    /// Nearest-rank percentile of the retained samples; `q` in `[0, 1]`.
    pub fn percentile(&self, q: f64) -> f64 {
        if self.samples.is_empty() {
            return f64::NAN;
        }
        let mut s = self.samples.clone();
        s.sort_unstable();
        let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
        s[rank - 1] as f64
    }
}

pub fn csv_row(r: &YcsbReport) -> String {
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let dist = format!("{}{}", r.distribution, if r.staleness_enabled { "" } else { "/baseline" });
    format!(
        "{ts},{},{},{},{},{:.1},{:.3},{:.3},{},{}",
        r.op,
        r.threads,
        r.bound,
        dist,
        r.throughput(),
        r.p50_us,
        r.p99_us,
        r.gate_waits,
        r.disk_reads
    )
}

/// Appends one report row, writing the header when the file is new.
pub fn append_csv(path: &Path, r: &YcsbReport) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{YCSB_CSV_HEADER}")?;
    }
    writeln!(f, "{}", csv_row(r))?;
    Ok(())
}
