//! Run directories: every invocation records its canonical configuration,
//! its seeds and its outputs in one directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mipprune::pruner::Seeds;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Flat, ordered view of a parsed command line.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub entries: BTreeMap<String, Value>,
}

fn flatten(prefix: &str, v: Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other);
        }
    }
}

impl RunConfig {
    pub fn new(command: &str, args: &impl Serialize) -> Result<Self> {
        let mut entries = BTreeMap::new();
        flatten("", serde_json::to_value(args)?, &mut entries);
        Ok(Self {
            command: command.to_string(),
            entries,
        })
    }

    /// `command = <name>` followed by sorted `key = <json>` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("command = {}\n", self.command);
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let command = match lines.next().and_then(|l| l.strip_prefix("command = ")) {
            Some(c) => c.to_string(),
            None => bail!("config must start with 'command = '"),
        };
        let mut entries = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let Some((k, v)) = line.split_once(" = ") else {
                bail!("config line {}: expected 'key = value'", i + 2);
            };
            let value = serde_json::from_str(v).with_context(|| format!("config line {}", i + 2))?;
            entries.insert(k.to_string(), value);
        }
        Ok(Self { command, entries })
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Uses `out` as is when given, otherwise a fresh
    /// `<root>/<timestamp>-<digest>` directory.
    pub fn create(out: Option<&Path>, root: &Path, config: &RunConfig, seeds: Option<Seeds>) -> Result<Self> {
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
                root.join(format!("{stamp}-{}", &config.digest()[..12]))
            }
        };
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let dir = Self { path };
        let text = config.to_text();
        if RunConfig::from_text(&text)? != *config {
            bail!("configuration does not survive its text form");
        }
        dir.write("config.txt", &text)?;
        if let Some(s) = seeds {
            dir.write("seeds.json", &pretty(&s)?)?;
        }
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    /// Copies an input file into the run directory so the run can be
    /// repeated without the original.
    pub fn keep_input(&self, name: &str, src: &Path) -> Result<()> {
        fs::copy(src, self.file(name)).with_context(|| format!("copying {}", src.display()))?;
        Ok(())
    }
}

pub fn pretty(v: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}
