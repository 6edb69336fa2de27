//! Output directory handling and the per-run manifest.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::CliError;

pub const DEFAULT_OUTPUT_DIR: &str = "lpflow-out";
pub const OUTPUT_DIR_ENV: &str = "LPFLOW_OUTPUT_DIR";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
struct OutputFile {
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Versions {
    lpflow: &'static str,
    lpflow_cli: &'static str,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    config: &'a ExperimentConfig,
    versions: Versions,
    wall_time_seconds: f64,
    outputs: &'a [OutputFile],
}

/// Collects report files for one run and writes the manifest at the end.
pub struct RunOutput {
    dir: PathBuf,
    command: String,
    started: Instant,
    files: Vec<OutputFile>,
}

impl RunOutput {
    pub fn create(dir: &Path, command: &str) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(RunOutput {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            started: Instant::now(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.files.push(OutputFile {
            file: name.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(path)
    }

    pub fn finish(self, config: &ExperimentConfig) -> Result<PathBuf, CliError> {
        let canonical = serde_json::to_string(config).expect("config serialises");
        let manifest = Manifest {
            command: &self.command,
            config_sha256: sha256_hex(canonical.as_bytes()),
            config,
            versions: Versions {
                lpflow: lpflow_version(),
                lpflow_cli: env!("CARGO_PKG_VERSION"),
            },
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
            outputs: &self.files,
        };
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

fn lpflow_version() -> &'static str {
    // Both crates share the workspace version.
    env!("CARGO_PKG_VERSION")
}
