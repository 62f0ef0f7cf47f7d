//! Run manifests: a reproducibility record written atomically into the
//! output directory before any other artifact.

use std::io;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use shapeflow::config::RunConfig;

use crate::context::{CliError, RunContext};

pub const MANIFEST_NAME: &str = "run_manifest.json";

/// FNV-1a over a byte stream; a cheap content fingerprint, not a
/// cryptographic digest.
fn fnv1a64(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

pub fn file_checksum(path: &Path) -> io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:016x}", fnv1a64(&bytes, FNV_OFFSET)))
}

/// Combined fingerprint of every file directly inside `dir` whose name
/// starts with `prefix`, folded in sorted order.
pub fn dir_checksum(dir: &Path, prefix: &str) -> io::Result<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(prefix))
        .collect();
    names.sort();
    let mut h = FNV_OFFSET;
    for name in &names {
        let bytes = std::fs::read(dir.join(name))?;
        h = fnv1a64(name.as_bytes(), h);
        h = fnv1a64(&bytes, h);
    }
    Ok(format!("{:016x}", h))
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub name: &'static str,
    pub path: PathBuf,
    pub fnv1a64: String,
}

/// Everything needed to reproduce a run: the resolved configuration, the
/// tool version, fingerprints of the inputs, and the declared outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub deterministic: bool,
    pub paper_scale: bool,
    pub started_unix_s: u64,
    /// Elapsed wall-clock seconds, filled in once the run completes.
    pub wall_clock_s: Option<f64>,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub config: RunConfig,
    #[serde(skip)]
    started: Instant,
}

impl RunManifest {
    pub fn new(ctx: &RunContext, command: &str, inputs: Vec<InputRecord>) -> RunManifest {
        RunManifest {
            tool: "shapeflow",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed: ctx.config.run_seed(),
            deterministic: ctx.deterministic,
            paper_scale: ctx.paper_scale,
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_s: None,
            inputs,
            outputs: Vec::new(),
            config: ctx.config.clone(),
            started: Instant::now(),
        }
    }

    pub fn declare_output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    /// Serializes to `run_manifest.json` via a temporary file and rename,
    /// so readers never observe a half-written manifest.
    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| CliError::Other(format!("manifest serialization: {e}")))?;
        let tmp = out_dir.join(format!("{MANIFEST_NAME}.tmp"));
        let dest = out_dir.join(MANIFEST_NAME);
        std::fs::write(&tmp, json).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::rename(&tmp, &dest).map_err(|e| CliError::Other(e.to_string()))?;
        Ok(())
    }

    /// Stamps the elapsed time and rewrites the manifest.
    pub fn finish(&mut self, out_dir: &Path) -> Result<(), CliError> {
        self.wall_clock_s = Some(self.started.elapsed().as_secs_f64());
        self.write(out_dir)
    }
}

/// Fingerprints one input file, failing with the missing-input exit code
/// when it does not exist.
pub fn input_file(name: &'static str, path: &Path) -> Result<InputRecord, CliError> {
    crate::context::require_exists(path, name)?;
    let fnv1a64 = file_checksum(path).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(InputRecord {
        name,
        path: path.to_path_buf(),
        fnv1a64,
    })
}

/// Fingerprints a directory input (files matching `prefix`).
pub fn input_dir(name: &'static str, dir: &Path, prefix: &str) -> Result<InputRecord, CliError> {
    crate::context::require_exists(dir, name)?;
    let fnv1a64 = dir_checksum(dir, prefix).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(InputRecord {
        name,
        path: dir.to_path_buf(),
        fnv1a64,
    })
}
