use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliResult, Context};
use crate::jobs::Job;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Fully resolved job; `tgd replay` runs exactly this.
    pub job: Job,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the run directory.
    pub outputs: Vec<FileDigest>,
}

#[derive(Serialize)]
pub struct Timing {
    pub started_utc: String,
    pub wall_seconds: f64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).data_ctx(path.display())?)))
}

fn walk(dir: &Path, base: &Path, out: &mut Vec<(String, PathBuf)>) -> CliResult<()> {
    for entry in fs::read_dir(dir).data_ctx(dir.display())? {
        let p = entry.data_ctx(dir.display())?.path();
        if p.is_dir() {
            walk(&p, base, out)?;
        } else {
            let rel = p.strip_prefix(base).expect("walked under base").to_string_lossy().replace('\\', "/");
            out.push((rel, p));
        }
    }
    Ok(())
}

/// Files under `dir`, sorted by relative path.
pub fn list_files(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    Ok(files)
}

/// A file's SHA-256, or for a directory the SHA-256 over
/// `"<relative path> <file sha256>\n"` lines of every file in it.
pub fn sha256_path(path: &Path) -> CliResult<String> {
    if path.is_dir() {
        let mut h = Sha256::new();
        for (rel, p) in list_files(path)? {
            h.update(format!("{rel} {}\n", sha256_file(&p)?));
        }
        Ok(hex::encode(h.finalize()))
    } else {
        sha256_file(path)
    }
}

pub fn digest_inputs(paths: &[&Path]) -> CliResult<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.display().to_string(),
                sha256: sha256_path(p)?,
            })
        })
        .collect()
}

/// Every file in the run directory except the manifest and timing file.
pub fn digest_outputs(run_dir: &Path) -> CliResult<Vec<FileDigest>> {
    list_files(run_dir)?
        .into_iter()
        .filter(|(rel, _)| rel != MANIFEST_FILE && rel != TIMING_FILE)
        .map(|(rel, p)| Ok(FileDigest { path: rel, sha256: sha256_file(&p)? }))
        .collect()
}

pub fn job_hash(job: &Job) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(job).expect("jobs serialize")))
}

/// `<base>/<UTC timestamp>-<first 12 hex digits of the job hash>`.
pub fn default_run_dir(base: &Path, job: &Job, now: chrono::DateTime<chrono::Utc>) -> PathBuf {
    base.join(format!("{}-{}", now.format("%Y%m%dT%H%M%SZ"), &job_hash(job)[..12]))
}

pub fn load_manifest(path: &Path) -> CliResult<RunManifest> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).config_ctx(path.display())?;
    serde_json::from_str(&text).config_ctx(path.display())
}
