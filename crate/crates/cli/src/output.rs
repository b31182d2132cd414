//! Output directory handling and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Shortest round-trip text for a float; `inf`/`-inf` for the infinities.
pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// One command invocation: collects input digests and written files, then
/// records them in `manifest.json` next to the outputs.
pub struct Run {
    dir: PathBuf,
    command: &'static str,
    config: Value,
    resolved: Value,
    inputs: Vec<Value>,
    outputs: Vec<Value>,
}

impl Run {
    pub fn new(out_dir: &Path, command: &'static str, config: &impl Serialize) -> Result<Run> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Run {
            dir: out_dir.to_path_buf(),
            command,
            config: serde_json::to_value(config)?,
            resolved: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Settings derived from the flags and the data (defaults filled in).
    pub fn resolved(&mut self, v: &impl Serialize) -> Result<()> {
        self.resolved = serde_json::to_value(v)?;
        Ok(())
    }

    /// Reads an input file and records its digest under the path as given.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| posthoc::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.inputs.push(json!({
            "path": path.to_string_lossy(),
            "sha256": sha256_hex(&bytes),
        }));
        Ok(bytes)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(json!({ "path": name, "sha256": sha256_hex(bytes) }));
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.write(name, &bytes)
    }

    pub fn finish(self) -> Result<()> {
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.config,
            "resolved": self.resolved,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        let mut s = serde_json::to_string_pretty(&manifest)?;
        s.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
