//! On-disk token library: a `manifest.json` plus one raw little-endian f32
//! file per token.

use std::collections::HashSet;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{ClassToken, Provenance};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub backend_id: String,
    pub embedding_dim: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub class_id: u32,
    pub class_label: String,
    pub token_string: String,
    pub file: String,
    pub steps: u64,
    pub learning_rate: f64,
    pub seed: u64,
    pub created_at: DateTime<Utc>,
}

fn embedding_file_name(class_id: u32) -> String {
    format!("class-{class_id}.emb")
}

fn check_library(library: &[ClassToken]) -> Result<(String, usize)> {
    let Some(first) = library.first() else {
        return Ok((String::new(), 0));
    };
    let backend_id = first.provenance.backend_id.clone();
    let dim = first.embedding.len();
    let mut tokens = HashSet::new();
    let mut classes = HashSet::new();
    for token in library {
        token.validate()?;
        if token.embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                context: format!("embedding of {}", token.token_string),
                expected: dim,
                found: token.embedding.len(),
            });
        }
        if token.provenance.backend_id != backend_id {
            return Err(Error::invalid(
                "backend_id",
                format!(
                    "{} was learned with {}, library uses {}",
                    token.token_string, token.provenance.backend_id, backend_id
                ),
            ));
        }
        if !tokens.insert(token.token_string.as_str()) {
            return Err(Error::DuplicateToken(token.token_string.clone()));
        }
        if !classes.insert(token.class_id) {
            return Err(Error::DuplicateClass(token.class_id));
        }
    }
    Ok((backend_id, dim))
}

/// Serialized manifest bytes for a library; the digest is computed over these.
pub fn manifest_for(library: &[ClassToken]) -> Result<Manifest> {
    let (backend_id, embedding_dim) = check_library(library)?;
    Ok(Manifest {
        format_version: FORMAT_VERSION,
        backend_id,
        embedding_dim,
        entries: library
            .iter()
            .map(|t| ManifestEntry {
                class_id: t.class_id,
                class_label: t.class_label.clone(),
                token_string: t.token_string.clone(),
                file: embedding_file_name(t.class_id),
                steps: t.provenance.steps,
                learning_rate: t.provenance.learning_rate,
                seed: t.provenance.seed,
                created_at: t.provenance.created_at,
            })
            .collect(),
    })
}

pub fn manifest_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `library` into `dir` and returns the SHA-256 of the manifest.
///
/// The directory is created if needed but must not already hold a manifest;
/// libraries are never rewritten in place.
pub fn save_token_library(library: &[ClassToken], dir: &Path) -> Result<String> {
    let manifest = manifest_for(library)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        return Err(Error::invalid(
            "path",
            format!("{} already holds a token library", dir.display()),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (token, entry) in library.iter().zip(&manifest.entries) {
        let bytes: Vec<u8> = token.embedding.iter().flat_map(|x| x.to_le_bytes()).collect();
        let path = dir.join(&entry.file);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    }
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    // manifest last, so a half-written directory never looks complete
    fs::write(&manifest_path, &bytes).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_digest(&bytes))
}

pub fn read_manifest(dir: &Path) -> Result<(Manifest, String)> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == ErrorKind::NotFound => return Err(Error::ManifestMissing(path)),
        Err(e) => return Err(Error::io(path, e)),
    };
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::ManifestMalformed(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::ManifestMalformed(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    Ok((manifest, manifest_digest(&bytes)))
}

pub fn load_token_library(dir: &Path) -> Result<Vec<ClassToken>> {
    let (manifest, _) = read_manifest(dir)?;
    let expected = manifest.embedding_dim as u64 * 4;
    let mut library = Vec::with_capacity(manifest.entries.len());
    for entry in manifest.entries {
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(Error::ManifestMalformed(format!(
                "embedding file name {:?} escapes the library directory",
                entry.file
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                return Err(Error::EmbeddingFileMissing {
                    token: entry.token_string,
                    path,
                })
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let found = bytes.len() as u64;
        if found < expected {
            return Err(Error::EmbeddingTruncated {
                token: entry.token_string,
                expected,
                found,
            });
        }
        if found > expected {
            return Err(Error::DimensionMismatch {
                context: format!("embedding file of {}", entry.token_string),
                expected: manifest.embedding_dim,
                found: bytes.len() / 4,
            });
        }
        let embedding = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        library.push(ClassToken {
            class_id: entry.class_id,
            class_label: entry.class_label,
            token_string: entry.token_string,
            embedding,
            provenance: Provenance {
                steps: entry.steps,
                learning_rate: entry.learning_rate,
                seed: entry.seed,
                backend_id: manifest.backend_id.clone(),
                created_at: entry.created_at,
            },
        });
    }
    check_library(&library)?;
    Ok(library)
}
