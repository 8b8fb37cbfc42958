//! Output plumbing: CSV tables, the JSON summary, the binary event log,
//! and the run manifest with content digests.
//!
//! Every command writes into one directory: zero or more CSV files, one
//! `summary.json` (schema-versioned), optionally `events.bin`, and finally
//! `manifest.json` listing the SHA-256 digest of every other output so a
//! re-run can be verified byte for byte.
//!
//! `events.bin` layout: the 8-byte header `VLEV` + version `u32` (LE),
//! then one 20-byte record per event, all little-endian:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 8    | event time, `f64`          |
//! | 8      | 4    | site x, `i32`              |
//! | 12     | 4    | site y, `i32`              |
//! | 16     | 1    | new spin value, `u8`       |
//! | 17     | 1    | component index, `u8`      |
//! | 18     | 2    | reserved, zero             |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use voterlab::simulator::Event;

/// Version of the JSON summary and binary event-log schemas.
pub const SCHEMA_VERSION: u32 = 1;

const EVENT_LOG_MAGIC: &[u8; 4] = b"VLEV";

/// Collects the files of one run and closes with a digest manifest.
pub struct OutputSet {
    dir: PathBuf,
    started_unix: u64,
    digests: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema: u32,
    /// Full snapshot of the effective configuration.
    config: &'a crate::config::Config,
    master_seed: u64,
    code_version: &'static str,
    started_unix: u64,
    finished_unix: u64,
    /// SHA-256 of every other file written by this run.
    outputs: &'a BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Summary<'a, T: Serialize> {
    schema: u32,
    command: &'a str,
    #[serde(flatten)]
    payload: T,
}

impl OutputSet {
    pub fn create(dir: &Path) -> Result<OutputSet> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(OutputSet {
            dir: dir.to_path_buf(),
            started_unix: unix_now(),
            digests: BTreeMap::new(),
        })
    }

    fn record(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.digests.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    /// Writes an RFC-4180 CSV file from a header and rows of cells.
    pub fn write_csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: impl IntoIterator<Item = Vec<String>>,
    ) -> Result<()> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header)?;
        for row in rows {
            writer.write_record(&row)?;
        }
        let bytes = writer.into_inner().context("flushing csv")?;
        self.record(name, &bytes)
    }

    /// Writes the single JSON summary for the run.
    pub fn write_summary<T: Serialize>(&mut self, command: &str, payload: T) -> Result<()> {
        let summary = Summary { schema: SCHEMA_VERSION, command, payload };
        let mut bytes = serde_json::to_vec_pretty(&summary)?;
        bytes.push(b'\n');
        self.record("summary.json", &bytes)
    }

    /// Writes the binary event log (format documented at module level).
    pub fn write_events(&mut self, name: &str, events: &[Event]) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 + 20 * events.len());
        bytes.extend_from_slice(EVENT_LOG_MAGIC);
        bytes.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        for event in events {
            bytes.extend_from_slice(&event.time.to_le_bytes());
            bytes.extend_from_slice(&(event.site.0 as i32).to_le_bytes());
            bytes.extend_from_slice(&(event.site.1 as i32).to_le_bytes());
            bytes.push(event.value as u8);
            bytes.push(event.component as u8);
            bytes.extend_from_slice(&[0, 0]);
        }
        self.record(name, &bytes)
    }

    /// Writes the manifest and finishes the run.
    pub fn finish(self, config: &crate::config::Config, master_seed: u64) -> Result<()> {
        let manifest = Manifest {
            schema: SCHEMA_VERSION,
            config,
            master_seed,
            code_version: env!("CARGO_PKG_VERSION"),
            started_unix: self.started_unix,
            finished_unix: unix_now(),
            outputs: &self.digests,
        };
        let path = self.dir.join("manifest.json");
        let mut file =
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(&mut file, &manifest)?;
        writeln!(file)?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Formats a float so CSV output is identical across runs and platforms.
pub fn num(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{x:.1}")
    } else {
        format!("{x}")
    }
}
