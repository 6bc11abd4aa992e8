//! Run manifests: every command leaves exactly one `manifest.json` in its
//! output directory recording what ran, on which inputs, producing which
//! outputs. Re-running the same command with the echoed configuration
//! reproduces every output byte-for-byte on one platform; the only field that
//! varies between such runs is `wall_clock_seconds`.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use bvcqr::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileHash {
    /// Path relative to the manifest's directory for outputs; as given on the
    /// command line for inputs.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Full configuration echo; shape depends on the command.
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_clock_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Hashes `names` (relative to `dir`) into a manifest output list.
pub fn hash_outputs(dir: &Path, names: &[&str]) -> Result<Vec<FileHash>> {
    names
        .iter()
        .map(|name| Ok(FileHash { path: (*name).to_string(), sha256: sha256_file(&dir.join(name))? }))
        .collect()
}

/// Writes `manifest.json` into `dir`. Must be called last: the manifest lists
/// and hashes the other outputs, so it cannot cover itself.
pub fn write_manifest(manifest: &RunManifest, dir: &Path) -> Result<()> {
    bvcqr::report::write_json(manifest, &dir.join("manifest.json"))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::Data(format!("no manifest.json in {}", dir.display())));
    }
    bvcqr::report::read_json(&path)
}
