//! Run directories: one per invocation, holding the resolved config and all outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const FINGERPRINT_FILE: &str = "fingerprint";

pub struct RunDir {
    pub path: PathBuf,
    pub fingerprint: String,
}

impl RunDir {
    /// Creates `<root>/<command>-<timestamp>-<fingerprint prefix>`, or uses
    /// `explicit` as is.
    pub fn create(root: &Path, explicit: Option<&Path>, command: &str, cfg: &RunConfig) -> Result<Self> {
        let fingerprint = cfg.fingerprint()?;
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let base = root.join(format!("{command}-{stamp}-{}", &fingerprint[..8]));
                let mut path = base.clone();
                let mut n = 1;
                while path.exists() {
                    path = PathBuf::from(format!("{}-{n}", base.display()));
                    n += 1;
                }
                path
            }
        };
        fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        let dir = RunDir { path, fingerprint };
        dir.write_text(CONFIG_FILE, &cfg.to_toml()?)?;
        dir.write_text(FINGERPRINT_FILE, &format!("{}\n", dir.fingerprint))?;
        Ok(dir)
    }

    /// Re-opens an existing run directory; its stored fingerprint must match `cfg`.
    pub fn resume(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let stored_path = path.join(FINGERPRINT_FILE);
        let stored = fs::read_to_string(&stored_path)
            .with_context(|| format!("reading {}", stored_path.display()))?;
        let fingerprint = cfg.fingerprint()?;
        if stored.trim() != fingerprint {
            bail!(
                "cannot resume {}: its config fingerprint {} differs from the current {}",
                path.display(),
                stored.trim(),
                fingerprint
            );
        }
        Ok(RunDir {
            path: path.to_path_buf(),
            fingerprint,
        })
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.path.join(rel)
    }

    pub fn write_text(&self, rel: impl AsRef<Path>, text: &str) -> Result<()> {
        write_atomic(&self.join(rel), text.as_bytes())
    }

    pub fn write_json(&self, rel: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value).context("serialising JSON")?;
        self.write_text(rel, &text)
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}
