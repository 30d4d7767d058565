//! Output bundle writing. Everything is deterministic: maps are ordered,
//! structs serialize in declaration order, floats use Rust's shortest
//! round-trip formatting, and the manifest carries no timestamps — the same
//! seed and version reproduce every file byte for byte.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use pilotwave::protocol::RunRecord;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const OUT_DIR_ENV: &str = "PILOTWAVE_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "pilotwave-out";

/// Resolution order: explicit flag, config's `[output] dir`, environment
/// variable, fixed default.
pub fn resolve_out_dir(flag: Option<&str>, config: Option<&str>) -> PathBuf {
    if let Some(dir) = flag {
        return PathBuf::from(dir);
    }
    if let Some(dir) = config {
        return PathBuf::from(dir);
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from(DEFAULT_OUT_DIR)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// What an invocation wrote, and where; serialized as `manifest.json`.
/// Contains no timestamps or host details by design.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    /// Path or `builtin:<name>` of the config the run was built from.
    pub config: String,
    /// SHA-256 of the exact config bytes (or canonical parameter string for
    /// config-less commands).
    pub config_sha256: String,
    pub version: String,
    pub seed: u64,
    pub runs: usize,
    /// File names written next to the manifest, in a fixed order.
    pub outputs: Vec<String>,
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> io::Result<PathBuf> {
    write_json(dir, "manifest.json", manifest)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

pub fn write_runs_jsonl(dir: &Path, records: &[RunRecord]) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("runs.jsonl");
    let mut w = BufWriter::new(fs::File::create(&path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(path)
}

/// One long-format CSV for all recorded trajectories:
/// `run,t,<dof names...>,branch_id`, rows ordered by run then time.
pub fn write_trajectories_csv(dir: &Path, records: &[RunRecord]) -> io::Result<Option<PathBuf>> {
    let mut recorded = records
        .iter()
        .filter_map(|r| r.trajectory.as_ref().map(|t| (r.run, t)))
        .peekable();
    let Some((_, first)) = recorded.peek().copied() else {
        return Ok(None);
    };
    fs::create_dir_all(dir)?;
    let path = dir.join("trajectories.csv");
    let mut w = BufWriter::new(fs::File::create(&path)?);
    writeln!(w, "run,t,{},branch_id", first.dof_names.join(","))?;
    for (run, t) in recorded {
        for ((time, row), branch) in t.times.iter().zip(&t.positions).zip(&t.branch_ids) {
            write!(w, "{run},{time}")?;
            for x in row {
                write!(w, ",{x}")?;
            }
            writeln!(w, ",{branch}")?;
        }
    }
    w.flush()?;
    Ok(Some(path))
}

/// Histogram CSV of final trajectory positions against the analytic
/// density: `bin_left,bin_right,count,empirical_density,expected_density`.
pub fn write_histogram_csv(
    dir: &Path,
    positions: &[f64],
    bins: usize,
    density: impl Fn(f64) -> f64,
) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("histogram.csv");
    let mut w = BufWriter::new(fs::File::create(&path)?);
    writeln!(w, "bin_left,bin_right,count,empirical_density,expected_density")?;
    let (lo, hi) = positions
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &x in positions {
        let mut idx = ((x - lo) / width) as usize;
        if idx >= bins {
            idx = bins - 1; // x == hi lands in the last bin
        }
        counts[idx] += 1;
    }
    let n = positions.len() as f64;
    for (i, count) in counts.iter().enumerate() {
        let left = lo + width * i as f64;
        let right = left + width;
        let empirical = *count as f64 / (n * width);
        let expected = density(0.5 * (left + right));
        writeln!(w, "{left},{right},{count},{empirical},{expected}")?;
    }
    w.flush()?;
    Ok(path)
}
