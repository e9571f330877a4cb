//! Configuration, persistence and run orchestration.

pub mod config;
pub mod csv;
pub mod manifest;
pub mod pipeline;
pub mod snapshot;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use config::{parse_config, ModelSpec, RunConfig};
pub use pipeline::{run_pipeline, Command, PipelineOutcome};

/// Writes `bytes` to a temporary file beside `path`, then renames it into
/// place, so `path` is either complete or untouched.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
