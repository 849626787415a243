//! Content manifest of an experiment tree and its verifier.

use std::path::Path;

use lrlens::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::output::{write_atomic, Provenance};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the tree root, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<FileEntry>,
}

fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Every file under `root` except the manifest and temporaries, sorted.
fn tree_files(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(root, e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        let rel = rel.join("/");
        if rel == MANIFEST_FILE || rel.ends_with(".tmp") {
            continue;
        }
        out.push(rel);
    }
    Ok(out)
}

pub fn build(root: &Path, prov: &Provenance) -> Result<Manifest> {
    let files = tree_files(root)?
        .into_iter()
        .map(|path| {
            let (sha256, bytes) = sha256_file(&root.join(&path))?;
            Ok(FileEntry { path, sha256, bytes })
        })
        .collect::<Result<_>>()?;
    Ok(Manifest {
        tool: "lrlens".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: prov.config_hash.clone(),
        seed: prov.seed,
        files,
    })
}

/// Writes `manifest.json` and returns the SHA-256 of its bytes.
pub fn write(root: &Path, prov: &Provenance) -> Result<String> {
    let m = build(root, prov)?;
    let mut bytes = serde_json::to_vec_pretty(&m)?;
    bytes.push(b'\n');
    write_atomic(&root.join(MANIFEST_FILE), &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn manifest_hash(root: &Path) -> Result<String> {
    Ok(sha256_file(&root.join(MANIFEST_FILE))?.0)
}

/// Provenance recorded inside an output file, when it has one.
fn embedded_provenance(path: &Path) -> Result<Option<(String, u64)>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "csv" => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let first = text.lines().next().unwrap_or_default();
            let field = |k: &str| first.split_whitespace().find_map(|f| f.strip_prefix(k).map(str::to_string));
            Ok(field("config_hash=").zip(field("seed=").and_then(|s| s.parse().ok())))
        }
        "json" => {
            let v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).map_err(|e| Error::io(path, e))?)?;
            Ok(v.get("config_hash").and_then(|h| h.as_str()).map(str::to_string).zip(v.get("seed").and_then(|s| s.as_u64())))
        }
        _ => Ok(None),
    }
}

/// Re-hashes every listed file and checks that each CSV and JSON output
/// carries the manifest's config hash and seed. Returns the manifest.
pub fn verify(root: &Path, expected_config_hash: Option<&str>) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingInputs(vec![format!("{} (produced by `lrlens report`)", path.display())]));
    }
    let m: Manifest = serde_json::from_slice(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
    let mut problems = Vec::new();
    if let Some(h) = expected_config_hash {
        if h != m.config_hash {
            problems.push(format!("manifest config hash {} does not match the config ({h})", m.config_hash));
        }
    }
    let listed: std::collections::BTreeSet<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    for f in &m.files {
        let p = root.join(&f.path);
        if !p.exists() {
            problems.push(format!("{}: missing", f.path));
            continue;
        }
        let (sha, bytes) = sha256_file(&p)?;
        if sha != f.sha256 || bytes != f.bytes {
            problems.push(format!("{}: content changed", f.path));
        }
        if let Some((hash, seed)) = embedded_provenance(&p)? {
            if hash != m.config_hash || seed != m.seed {
                problems.push(format!("{}: written by config {hash} seed {seed}", f.path));
            }
        }
    }
    for rel in tree_files(root)? {
        if !listed.contains(rel.as_str()) {
            problems.push(format!("{rel}: not in manifest"));
        }
    }
    if problems.is_empty() {
        Ok(m)
    } else {
        Err(Error::Manifest(problems))
    }
}
