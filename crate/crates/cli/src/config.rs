//! Key=value run configuration and reproducibility manifests.
//!
//! Config files are plain `key=value` lines; command-line flags override
//! file values. Every command serializes its effective configuration,
//! seed and input hashes into a manifest so a run can be reproduced from
//! the manifest alone. Manifests carry no timestamps: rerunning a
//! command over identical inputs yields identical bytes.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};
use walkdir::WalkDir;

use cantus_core::stablehash::StableHasher;

#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    values: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn load(path: &Path) -> Result<KeyValues> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), i + 1))?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KeyValues { values })
    }

    /// Flag value if present, else config file value, else the default.
    pub fn resolve<T: FromStr + Display>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| anyhow!("config key {key}: cannot parse `{raw}`")),
            None => Ok(default),
        }
    }
}

/// Accumulates the effective run description and writes the manifest.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Manifest {
        let mut m = Manifest::default();
        m.set("command", command);
        m
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.set(&format!("input.{name}"), path.display());
        self.set(&format!("input.{name}.hash"), format!("{:016x}", hash_path(path)?));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}={v}\n"));
        }
        fs::write(path, out).with_context(|| format!("cannot write manifest {}", path.display()))
    }
}

/// Stable hash of a file, or of a directory's sorted (path, bytes).
pub fn hash_path(path: &Path) -> Result<u64> {
    let mut h = StableHasher::new(0x4d4e);
    if path.is_file() {
        h.write(&fs::read(path).with_context(|| format!("cannot read {}", path.display()))?);
        return Ok(h.finish());
    }
    let mut files: Vec<PathBuf> = WalkDir::new(path)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    files.sort();
    for f in files {
        let rel = f.strip_prefix(path).unwrap_or(&f);
        h.write(rel.to_string_lossy().as_bytes());
        h.write(&fs::read(&f).with_context(|| format!("cannot read {}", f.display()))?);
    }
    Ok(h.finish())
}
