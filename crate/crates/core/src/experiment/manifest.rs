//! Run manifests: every file a command writes is listed, with its hash, in
//! the manifest of the stage directory that owns it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_MANIFEST: &str = "run-manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Path relative to the output root, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn rel_string(root: &Path, path: &Path) -> Result<String> {
    let rel = path
        .strip_prefix(root)
        .map_err(|_| Error::Invalid(format!("{} is outside {}", path.display(), root.display())))?;
    Ok(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"))
}

/// Every regular file under `dir`, sorted.
pub fn walk_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Single-writer output directory of one command.
pub struct Stage {
    root: PathBuf,
    dir: PathBuf,
    command: String,
    started: u64,
}

impl Stage {
    /// Creates `root/rel`. An existing directory is an error unless `force`
    /// is set, in which case it is removed first.
    pub fn begin(root: &Path, rel: &str, command: &str, force: bool) -> Result<Self> {
        let dir = root.join(rel);
        if dir.exists() {
            if !force {
                return Err(Error::OutputExists(dir));
            }
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Self {
            root: root.to_path_buf(),
            dir,
            command: command.to_string(),
            started: now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, bytes)?;
        Ok(p)
    }

    /// Hashes every file in the stage directory into its manifest.
    pub fn finish(self, config_hash: &str, seed: u64) -> Result<RunManifest> {
        let mut artifacts = Vec::new();
        for p in walk_files(&self.dir)? {
            if p.file_name().is_some_and(|n| n == RUN_MANIFEST) {
                continue;
            }
            let bytes = fs::read(&p)?;
            artifacts.push(Artifact {
                path: rel_string(&self.root, &p)?,
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
        let m = RunManifest {
            command: self.command,
            config_hash: config_hash.to_string(),
            seed,
            artifacts,
            started: self.started,
            finished: now(),
        };
        fs::write(self.dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestAudit {
    pub manifests: usize,
    pub artifacts: usize,
    /// Files no manifest lists.
    pub orphans: Vec<String>,
    /// Files listed by more than one manifest.
    pub shared: Vec<String>,
    /// Listed files that are gone or whose hash changed.
    pub stale: Vec<String>,
}

impl ManifestAudit {
    pub fn is_clean(&self) -> bool {
        self.orphans.is_empty() && self.shared.is_empty() && self.stale.is_empty()
    }
}

/// Checks that every file under `root` belongs to exactly one manifest and
/// that every listed file still has its recorded hash.
pub fn audit(root: &Path) -> Result<ManifestAudit> {
    let files = walk_files(root)?;
    let mut owners: BTreeMap<String, usize> = BTreeMap::new();
    let mut audit = ManifestAudit::default();
    for p in files.iter().filter(|p| p.file_name().is_some_and(|n| n == RUN_MANIFEST)) {
        let m: RunManifest = serde_json::from_slice(&fs::read(p)?)?;
        audit.manifests += 1;
        for a in &m.artifacts {
            *owners.entry(a.path.clone()).or_default() += 1;
            let full = root.join(&a.path);
            if !full.exists() || sha256_file(&full)? != a.sha256 {
                audit.stale.push(a.path.clone());
            }
        }
    }
    audit.artifacts = owners.len();
    for p in &files {
        if p.file_name().is_some_and(|n| n == RUN_MANIFEST) {
            continue;
        }
        let rel = rel_string(root, p)?;
        match owners.get(&rel) {
            None => audit.orphans.push(rel),
            Some(&n) if n > 1 => audit.shared.push(rel),
            _ => {}
        }
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_lists_files_and_audit_finds_orphans() {
        let root = tempfile::tempdir().unwrap();
        let s = Stage::begin(root.path(), "a", "test", false).unwrap();
        s.write("x.txt", "1").unwrap();
        s.write("sub/y.txt", "2").unwrap();
        let m = s.finish("h", 3).unwrap();
        let paths: Vec<&str> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
        assert_eq!(paths, ["a/sub/y.txt", "a/x.txt"]);
        assert!(audit(root.path()).unwrap().is_clean());

        fs::write(root.path().join("loose.txt"), "z").unwrap();
        fs::write(root.path().join("a/x.txt"), "changed").unwrap();
        let a = audit(root.path()).unwrap();
        assert_eq!(a.orphans, ["loose.txt"]);
        assert_eq!(a.stale, ["a/x.txt"]);
    }

    #[test]
    fn existing_stage_needs_force() {
        let root = tempfile::tempdir().unwrap();
        Stage::begin(root.path(), "a", "t", false).unwrap().finish("h", 0).unwrap();
        assert!(matches!(Stage::begin(root.path(), "a", "t", false), Err(Error::OutputExists(_))));
        let s = Stage::begin(root.path(), "a", "t", true).unwrap();
        assert!(walk_files(s.dir()).unwrap().is_empty());
    }
}
