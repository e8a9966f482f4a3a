//! `manifest.json`: what a stage read, how it was configured, and content
//! hashes of what it wrote. No timestamps or output paths, so identical runs
//! give identical directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRecord {
    pub role: String,
    pub path: String,
    /// File name → sha256, for every file of the input.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub tool: String,
    pub inputs: Vec<InputRecord>,
    /// Resolved parameters, keyed like the command's flags.
    pub parameters: Value,
    pub seed: Option<u64>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub metrics: Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes every regular file of `path` (or `path` itself when it is a file),
/// keyed by path relative to it, skipping any manifest.
pub fn hash_tree(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if path.is_file() {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.insert(name, sha256_hex(&fs::read(path)?));
        return Ok(out);
    }
    walk(path, path, &mut out)?;
    Ok(out)
}

fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> CliResult<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            walk(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            out.insert(rel, sha256_hex(&fs::read(&p)?));
        }
    }
    Ok(())
}

impl Manifest {
    pub fn new(command: &str, parameters: Value, seed: Option<u64>) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.into(),
            tool: concat!("mcbw ", env!("CARGO_PKG_VERSION")).into(),
            inputs: Vec::new(),
            parameters,
            seed,
            outputs: BTreeMap::new(),
            metrics: Value::Null,
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let files = hash_tree(path)?;
        self.inputs.push(InputRecord { role: role.into(), path: path.display().to_string(), files });
        Ok(())
    }

    /// Hashes `dir` and writes the manifest into it.
    pub fn finish(mut self, dir: &Path) -> CliResult<Self> {
        self.outputs = hash_tree(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n")?;
        Ok(self)
    }
}
