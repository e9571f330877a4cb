//! Run manifests: the resolved configuration plus a `[manifest]` table of
//! checksums. Feeding a manifest back as `--config` repeats the run.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hjb::SolveReport;
use crate::io::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default)]
pub struct ManifestInfo {
    pub command: String,
    /// `(scheme, report)` for every backward solve of the run.
    pub solves: Vec<(String, SolveReport)>,
    /// `(file name relative to the output directory, sha256)`.
    pub files: Vec<(String, String)>,
}

impl ManifestInfo {
    pub fn record_file(&mut self, name: &str, bytes: &[u8]) {
        self.files.push((name.to_string(), sha256_hex(bytes)));
    }
}

pub fn render_manifest(cfg: &RunConfig, info: &ManifestInfo) -> Result<String> {
    let mut table = toml::Table::new();
    table.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    table.insert("command".into(), info.command.clone().into());
    let solves: Vec<toml::Value> = info
        .solves
        .iter()
        .map(|(scheme, r)| {
            let mut t = toml::Table::new();
            t.insert("scheme".into(), scheme.clone().into());
            t.insert("integrator".into(), r.integrator.as_str().into());
            t.insert("series_sha256".into(), r.series_checksum().into());
            t.insert("total_clamps".into(), (r.total_clamps() as i64).into());
            t.insert("exterior_clamps".into(), (r.total_exterior_clamps() as i64).into());
            t.insert(
                "slice_sha256".into(),
                toml::Value::Array(r.checksums.iter().map(|c| c.clone().into()).collect()),
            );
            toml::Value::Table(t)
        })
        .collect();
    table.insert("solves".into(), toml::Value::Array(solves));
    let mut files = toml::Table::new();
    for (name, sha) in &info.files {
        files.insert(name.clone(), sha.clone().into());
    }
    table.insert("files".into(), toml::Value::Table(files));
    let mut wrapper = toml::Table::new();
    wrapper.insert("manifest".into(), toml::Value::Table(table));
    let tail = toml::to_string(&wrapper).map_err(|e| Error::Config(format!("cannot render manifest: {e}")))?;
    Ok(format!("{}\n{tail}", cfg.to_toml()?))
}

/// Per-file checksums recorded in a manifest document.
pub fn manifest_file_checksums(text: &str) -> Result<Vec<(String, String)>> {
    let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Data(format!("manifest: {e}")))?;
    let files = doc
        .get("manifest")
        .and_then(|m| m.get("files"))
        .and_then(|f| f.as_table())
        .ok_or_else(|| Error::Data("manifest has no [manifest.files] table".into()))?;
    Ok(files
        .iter()
        .map(|(k, v)| (k.clone(), v.as_str().unwrap_or_default().to_string()))
        .collect())
}

/// Recomputes the checksums of the files a manifest lists, relative to `dir`,
/// and returns the names that differ or are missing.
pub fn verify_manifest_files(text: &str, dir: &Path) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for (name, sha) in manifest_file_checksums(text)? {
        match std::fs::read(dir.join(&name)) {
            Ok(bytes) if sha256_hex(&bytes) == sha => {}
            _ => bad.push(name),
        }
    }
    Ok(bad)
}
