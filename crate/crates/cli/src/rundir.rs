//! Run-directory resolution and config snapshots. Every subcommand puts its
//! outputs under one directory: `--out` when given, otherwise
//! `$MIMIC_RUN_ROOT/<command>` (root defaulting to `./runs`).

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const RUN_ROOT_ENV: &str = "MIMIC_RUN_ROOT";

pub fn resolve(out: Option<&Path>, command: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var(RUN_ROOT_ENV).unwrap_or_else(|_| "runs".to_string());
            Path::new(&root).join(command)
        }
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Snapshot the effective settings as pretty JSON next to the outputs.
pub fn write_snapshot<T: Serialize>(dir: &Path, snapshot: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(snapshot)?;
    std::fs::write(dir.join("config.json"), json + "\n")
        .with_context(|| format!("writing config snapshot in {}", dir.display()))
}
