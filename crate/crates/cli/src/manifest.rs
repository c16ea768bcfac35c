//! Run manifests: a JSON sidecar written next to every output artifact that
//! records the command, tool version, resolved configuration, seed, and
//! SHA-256 digests of every input file, so a run can be replayed exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    /// Subcommand name (`split`, `segment`, ...).
    pub command: String,
    /// Tool version the artifact was produced with.
    pub version: String,
    /// Seed the run actually used, after any environment override.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Resolved knob values (defaults filled in, overrides applied).
    pub config: serde_json::Value,
    /// Input path -> SHA-256 hex digest of the bytes that were read.
    pub inputs: BTreeMap<String, String>,
    /// Paths of the artifacts this run produced.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Digests `path` and records it as an input.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes the manifest next to `primary_output`: `<file>.manifest.json`
    /// for file outputs, `<dir>/manifest.json` for directory outputs.
    pub fn write_next_to(&self, primary_output: &Path, force: bool) -> Result<PathBuf> {
        let path = manifest_path(primary_output);
        guard_overwrite(&path, force)?;
        let mut text = serde_json::to_string_pretty(self).context("serializing manifest")?;
        text.push('\n');
        write_text(&path, &text)?;
        Ok(path)
    }
}

pub fn manifest_path(primary_output: &Path) -> PathBuf {
    if primary_output.is_dir() {
        primary_output.join("manifest.json")
    } else {
        let mut name = primary_output
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".to_string());
        name.push_str(".manifest.json");
        primary_output.with_file_name(name)
    }
}

/// Refuses to clobber an existing file unless `--force` was given.
pub fn guard_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(
            "output `{}` already exists; pass --force to overwrite",
            path.display()
        );
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f =
        File::create(path).with_context(|| format!("creating `{}`", path.display()))?;
    f.write_all(text.as_bytes())
        .with_context(|| format!("writing `{}`", path.display()))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening `{}`", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f
            .read(&mut buf)
            .with_context(|| format!("reading `{}`", path.display()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let out = hasher.finalize();
    Ok(out.iter().map(|b| format!("{b:02x}")).collect())
}
