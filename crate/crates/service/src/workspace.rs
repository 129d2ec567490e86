//! On-disk artifact layout.
//!
//! Every artifact kind lives in its own directory of numbered versions
//! (`v0001`, `v0002`, ...). A new version is staged in a hidden sibling
//! directory and renamed into place, so a crash never leaves a partial
//! version behind; committing content identical to the latest version
//! reuses it. Samples are a flat write-once store and the audit logs are
//! append-only JSON lines.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use shiftkit::generation::SampleStore;

use crate::error::{Result, ServiceError};

pub const WORKSPACE_ENV: &str = "SHIFTKIT_WORKSPACE";

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Committed {
    pub version: u32,
    pub path: PathBuf,
    /// False when the content matched the latest version and nothing was written.
    pub created: bool,
}

pub fn version_name(version: u32) -> String {
    format!("v{version:04}")
}

fn parse_version(name: &str) -> Option<u32> {
    name.strip_prefix('v')
        .filter(|s| s.len() >= 4 && s.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|s| s.parse().ok())
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| ServiceError::io(&root, e))?;
        Ok(Workspace { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn samples(&self) -> SampleStore {
        SampleStore::new(self.root.join("samples"))
    }

    pub fn tokens_dir(&self) -> PathBuf {
        self.root.join("tokens")
    }

    pub fn registry_dir(&self) -> PathBuf {
        self.root.join("registry")
    }

    pub fn scores_dir(&self, shift: &str, class_id: u32) -> PathBuf {
        self.root.join("scores").join(shift).join(format!("class-{class_id}"))
    }

    pub fn thresholds_dir(&self) -> PathBuf {
        self.root.join("thresholds")
    }

    pub fn calibration_dir(&self, shift: &str) -> PathBuf {
        self.root.join("calibration").join(shift)
    }

    pub fn filtered_dir(&self, shift: &str) -> PathBuf {
        self.root.join("filtered").join(shift)
    }

    pub fn predictions_dir(&self, shift: &str) -> PathBuf {
        self.root.join("predictions").join(shift)
    }

    pub fn evaluations_dir(&self, shift: &str) -> PathBuf {
        self.root.join("evaluations").join(shift)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn verdict_log(&self) -> PathBuf {
        self.root.join("audit").join("verdicts.jsonl")
    }

    pub fn decision_log(&self) -> PathBuf {
        self.root.join("audit").join("decisions.jsonl")
    }

    /// Names of the immediate subdirectories of `dir`, sorted; missing dir is empty.
    pub fn child_dirs(dir: &Path) -> Result<Vec<String>> {
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(ServiceError::io(dir, e)),
        };
        let mut out = vec![];
        for entry in entries {
            let entry = entry.map_err(|e| ServiceError::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().is_dir() && !name.starts_with('.') {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn versions(dir: &Path) -> Result<Vec<u32>> {
        let mut v: Vec<u32> = Self::child_dirs(dir)?.iter().filter_map(|n| parse_version(n)).collect();
        v.sort_unstable();
        Ok(v)
    }

    pub fn latest(dir: &Path) -> Result<Option<(u32, PathBuf)>> {
        Ok(Self::versions(dir)?.last().map(|&v| (v, dir.join(version_name(v)))))
    }

    pub fn version_path(dir: &Path, version: u32) -> Result<PathBuf> {
        let path = dir.join(version_name(version));
        if path.is_dir() {
            Ok(path)
        } else {
            Err(ServiceError::not_found("version", path.display().to_string()))
        }
    }

    /// Commits a version made of the given files (names relative to the version dir).
    pub fn commit_files(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Committed> {
        Self::commit_with(dir, |staging| {
            for (name, bytes) in files {
                let path = staging.join(name);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| ServiceError::io(parent, e))?;
                }
                fs::write(&path, bytes).map_err(|e| ServiceError::io(&path, e))?;
            }
            Ok(())
        })
    }

    /// Commits a version whose content `fill` writes into a staging directory.
    pub fn commit_with<F>(dir: &Path, fill: F) -> Result<Committed>
    where
        F: FnOnce(&Path) -> Result<()>,
    {
        fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir, e))?;
        let staging = dir.join(format!(
            ".staging-{}-{}",
            std::process::id(),
            chrono::Utc::now().timestamp_nanos_opt().unwrap_or_default()
        ));
        fs::create_dir_all(&staging).map_err(|e| ServiceError::io(&staging, e))?;
        let result = fill(&staging).and_then(|()| {
            if let Some((version, path)) = Self::latest(dir)? {
                if same_tree(&staging, &path)? {
                    fs::remove_dir_all(&staging).map_err(|e| ServiceError::io(&staging, e))?;
                    return Ok(Committed {
                        version,
                        path,
                        created: false,
                    });
                }
            }
            let version = Self::latest(dir)?.map_or(1, |(v, _)| v + 1);
            let path = dir.join(version_name(version));
            fs::rename(&staging, &path).map_err(|e| ServiceError::io(&path, e))?;
            Ok(Committed {
                version,
                path,
                created: true,
            })
        });
        if result.is_err() && staging.exists() {
            let _ = fs::remove_dir_all(&staging);
        }
        result
    }

    /// Appends one JSON record per line.
    pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| ServiceError::io(parent, e))?;
        }
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).map_err(shiftkit::Error::from)?;
            buf.push(b'\n');
        }
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ServiceError::io(path, e))?;
        file.write_all(&buf).map_err(|e| ServiceError::io(path, e))?;
        file.sync_data().map_err(|e| ServiceError::io(path, e))
    }
}

fn tree_files(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = vec![];
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| ServiceError::io(&dir, e))? {
            let path = entry.map_err(|e| ServiceError::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(|e| ServiceError::io(&path, e))?;
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn same_tree(a: &Path, b: &Path) -> Result<bool> {
    Ok(tree_files(a)? == tree_files(b)?)
}
