//! The `<command>.run.toml` file written next to every output set.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
struct InputFile {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunLog {
    command: String,
    cli_version: String,
    library_version: String,
    seed: u64,
    outputs: Vec<String>,
    warnings: Vec<String>,
    inputs: Vec<InputFile>,
    config: toml::Table,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunLog {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            cli_version: env!("CARGO_PKG_VERSION").to_string(),
            library_version: fluoromap::VERSION.to_string(),
            seed,
            outputs: Vec::new(),
            warnings: Vec::new(),
            inputs: Vec::new(),
            config: toml::Table::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputFile {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    pub fn config<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let v = toml::Value::try_from(value).with_context(|| format!("recording config `{key}`"))?;
        self.config.insert(key.to_string(), v);
        Ok(())
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn warn(&mut self, w: impl Display) {
        let msg = w.to_string();
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.run.toml", self.command));
        let text = toml::to_string(self).context("serializing run log")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
