//! Output files with provenance sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use heston_coevo::ExperimentConfig;
use serde::Serialize;
use serde_json::{json, Value};

/// Writes files under one directory. Every file `name` gets a sidecar
/// `name.config.json` with the command, its arguments and the resolved
/// configuration.
pub struct Output {
    dir: PathBuf,
    meta: Value,
    written: Vec<PathBuf>,
}

impl Output {
    pub fn new(dir: &Path, command: &str, args: Value, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta: json!({ "command": command, "args": args, "config": cfg }),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        let side = self.path(&format!("{name}.config.json"));
        let mut meta = serde_json::to_string_pretty(&self.meta)?;
        meta.push('\n');
        fs::write(&side, meta).with_context(|| format!("writing {}", side.display()))?;
        self.written.push(path);
        Ok(())
    }

    pub fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.text(name, std::str::from_utf8(&bytes)?)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(name, &s)
    }

    pub fn into_written(self) -> Vec<PathBuf> {
        self.written
    }
}

/// Round-trip float formatting; exponent notation at the extremes.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn opt<T: ToString>(x: Option<T>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}
