use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::address::LogicalAddress;
use crate::tables::TableMeta;

pub const FORMAT_VERSION: u32 = 1;
const PREFIX: &str = "MANIFEST.";

/// Durable description of one checkpoint, stored as JSON in `MANIFEST.<id>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub manifest_id: u64,
    pub flushed_tail: LogicalAddress,
    pub page_size: u64,
    pub index_buckets: u64,
    pub index_snapshot_file: String,
    pub segment_files: Vec<String>,
    pub table_metas: Vec<TableMeta>,
}

impl CheckpointManifest {
    pub fn file_name(id: u64) -> String {
        format!("{PREFIX}{id}")
    }

    /// Segment numbers referenced by this manifest.
    pub fn segment_numbers(&self, path: &Path) -> Result<Vec<u64>> {
        self.segment_files
            .iter()
            .map(|s| {
                s.strip_prefix("seg.")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| corrupt(path, format!("bad segment name `{s}`")))
            })
            .collect()
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptManifest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Returns the manifest with the highest id in `dir`, if any.
pub fn latest(dir: &Path) -> Result<Option<(PathBuf, CheckpointManifest)>> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(id) = name
            .to_str()
            .and_then(|n| n.strip_prefix(PREFIX))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| id > *b) {
            best = Some((id, entry.path()));
        }
    }
    let Some((id, path)) = best else {
        return Ok(None);
    };
    let m = read(&path)?;
    if m.manifest_id != id {
        return Err(corrupt(&path, "manifest id does not match file name"));
    }
    Ok(Some((path, m)))
}

pub fn read(path: &Path) -> Result<CheckpointManifest> {
    let text = fs::read_to_string(path)?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| corrupt(path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported format version {}", m.format_version)));
    }
    if !m.page_size.is_power_of_two() || !m.index_buckets.is_power_of_two() {
        return Err(corrupt(path, "page size and bucket count must be powers of two"));
    }
    Ok(m)
}

pub fn write(dir: &Path, m: &CheckpointManifest) -> Result<PathBuf> {
    let path = dir.join(CheckpointManifest::file_name(m.manifest_id));
    let tmp = dir.join(format!("{}.tmp", CheckpointManifest::file_name(m.manifest_id)));
    {
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer_pretty(&mut f, m).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    fs::File::open(dir)?.sync_all()?;
    Ok(path)
}
