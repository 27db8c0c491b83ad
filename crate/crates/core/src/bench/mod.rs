//! YCSB-style workloads and the zipfian key generator.

pub mod report;
pub mod ycsb;
pub mod zipf;

pub use report::{Reservoir, YCSB_CSV_HEADER};
pub use ycsb::{ycsb_load, ycsb_run, Distribution, WorkloadSpec, YcsbReport};
pub use zipf::Zipfian;
