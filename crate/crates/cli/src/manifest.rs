//! Run manifests: every output set is accompanied by a JSON record of the
//! fully resolved configuration, input hashes, and outputs, written
//! atomically. `patchprobe rerun <manifest>` regenerates the outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use patchprobe_core::analysis::{atomic_write, platform_tag};
use patchprobe_core::error::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    pub platform: String,
}

pub struct RunScope {
    subcommand: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    input_hashes: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl RunScope {
    pub fn new<C: Serialize>(subcommand: &str, config: &C) -> Self {
        RunScope {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config).expect("config serialization"),
            seeds: Vec::new(),
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seeds.push(seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.input_hashes
            .insert(path.display().to_string(), crate::inputs::crc_of_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `<first-output>.manifest.json`.
    pub fn finish(self) -> Result<()> {
        let manifest = RunManifest {
            manifest_version: 1,
            subcommand: self.subcommand,
            config: self.config,
            seeds: self.seeds,
            input_hashes: self.input_hashes,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            platform: platform_tag(),
        };
        let target = match self.outputs.first() {
            Some(first) => manifest_path(first),
            None => return Ok(()),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
        atomic_write(&target, json.as_bytes())
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn load(path: &Path) -> Result<RunManifest> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| patchprobe_core::error::Error::invalid(format!("bad manifest: {e}")))
}
