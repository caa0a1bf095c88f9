use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub role: String,
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

/// Everything needed to rerun a command: resolved configuration, seed,
/// input digests and tool version. Timings are informational.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub stats: BTreeMap<String, serde_json::Value>,
    pub warnings: Vec<String>,
    pub timings: Vec<Timing>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, threads: Option<usize>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            seed,
            threads,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            stats: BTreeMap::new(),
            warnings: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn config(&mut self, cfg: &impl Serialize) -> Result<()> {
        self.config = serde_json::to_value(cfg)?;
        Ok(())
    }

    pub fn stat(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.stats.insert(key.to_string(), v);
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings.push(Timing {
            stage: stage.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        out
    }

    /// Reads an input file, hashing its bytes into the manifest.
    pub fn read_input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| crate::UsageError(format!("cannot read {role} `{}`: {e}", path.display())))?;
        self.inputs.push(InputRecord {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(bytes)
    }
}

/// Output directory; every file a command writes goes through [`OutDir::create`].
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create output directory `{}`", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Opens `rel` (plain relative components only) for writing.
    pub fn create(&mut self, rel: &str) -> Result<BufWriter<fs::File>> {
        let rel_path = Path::new(rel);
        if !rel_path.components().all(|c| matches!(c, std::path::Component::Normal(_))) {
            anyhow::bail!("refusing to write `{rel}` outside the output directory");
        }
        let path = self.root.join(rel_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("cannot create `{}`", parent.display()))?;
        }
        let f = fs::File::create(&path).with_context(|| format!("cannot write `{}`", path.display()))?;
        self.written.push(rel.to_string());
        Ok(BufWriter::new(f))
    }

    pub fn json(&mut self, rel: &str, value: &impl Serialize) -> Result<()> {
        let mut w = self.create(rel)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn finish(mut self, mut manifest: RunManifest) -> Result<()> {
        manifest.outputs = self.written.clone();
        manifest.outputs.push("manifest.json".into());
        self.json("manifest.json", &manifest)
    }
}
