use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance block embedded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub version: String,
    /// sha256 of every input file (directories hash their files in name order).
    pub inputs: BTreeMap<String, String>,
    /// Seconds since the epoch; `SOURCE_DATE_EPOCH` overrides the clock.
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            created_unix: now(),
        })
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(self)
    }
}

fn now() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
}

pub fn hash_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            hasher.update(f.file_name().unwrap().to_string_lossy().as_bytes());
            hasher.update(fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
        }
    } else {
        hasher.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    manifest: &'a RunManifest,
    report: &'a T,
}

/// Pretty JSON of `{manifest, report}` with a trailing newline.
pub fn render<T: Serialize>(manifest: &RunManifest, report: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&Envelope { manifest, report })?;
    s.push('\n');
    Ok(s)
}

/// Writes the report to `out`, or stdout when `out` is `None`.
pub fn emit<T: Serialize>(manifest: &RunManifest, report: &T, out: Option<&Path>) -> Result<()> {
    let text = render(manifest, report)?;
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
