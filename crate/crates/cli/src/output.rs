//! The `<outdir>` layout shared by every command.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{hex, Config};

/// `{metric, value, n, seed, config_hash}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Writes files into the output directory and records them for the
/// manifest.
pub struct OutputDir {
    root: PathBuf,
    command: &'static str,
    seed: u64,
    config_hash: String,
    files: Vec<String>,
}

impl OutputDir {
    /// Creates the directory and writes `config.echo`.
    pub fn create(root: &Path, command: &'static str, cfg: &Config) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let mut out = Self {
            root: root.to_path_buf(),
            command,
            seed: cfg.seed(),
            config_hash: cfg.hash(),
            files: Vec::new(),
        };
        out.write("config.echo", cfg.echo().as_bytes())?;
        Ok(out)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    /// Buffers whatever `fill` writes, then stores it as `name`.
    pub fn write_with(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn metric(&self, metric: &str, value: f64, n: usize) -> MetricRecord {
        MetricRecord {
            metric: metric.to_string(),
            value,
            n,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        self.write(name, ck.to_text()?.as_bytes())
    }

    /// Writes `manifest.json` listing every file with its size and hash.
    pub fn finish(mut self, extra: serde_json::Value) -> Result<()> {
        let mut files = Vec::new();
        for name in &self.files {
            let bytes = fs::read(self.path(name))?;
            files.push(json!({
                "name": name,
                "bytes": bytes.len(),
                "sha256": hex(&Sha256::digest(&bytes)),
            }));
        }
        let manifest = json!({
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "files": files,
            "details": extra,
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let p = self.path("manifest.json");
        fs::File::create(&p)
            .and_then(|mut f| f.write_all(text.as_bytes()))
            .with_context(|| format!("writing {}", p.display()))?;
        self.files.clear();
        Ok(())
    }
}

/// Row-major samples as CSV with header `x0,..,x{d-1}`.
pub fn samples_csv(w: &mut impl Write, samples: &[f64], dim: usize) -> std::io::Result<()> {
    let header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in samples.chunks_exact(dim) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}
