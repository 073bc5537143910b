//! Artifact persistence: atomic writes, embedded config headers, and hash
//! verification on read (stages refuse to run over artifacts produced by a
//! different configuration).

use crate::config::RunConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("missing artifact {artifact}; run stage '{produced_by}' first")]
    MissingDependency {
        artifact: String,
        produced_by: &'static str,
    },
    #[error("artifact {artifact} was produced under config {found} but the current config is {expected}; refusing to run")]
    HashMismatch {
        artifact: String,
        expected: String,
        found: String,
    },
    #[error("artifact {artifact} is corrupt: {reason}")]
    Corrupt { artifact: String, reason: String },
    #[error("failed writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Header embedded in every artifact: the producing stage, the config hash,
/// and the fully serialized configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub artifact: String,
    pub stage: String,
    pub config_hash: String,
    pub config: RunConfig,
}

impl ArtifactHeader {
    pub fn new(artifact: &str, stage: &str, cfg: &RunConfig) -> Self {
        ArtifactHeader {
            artifact: artifact.to_string(),
            stage: stage.to_string(),
            config_hash: cfg.config_hash(),
            config: cfg.clone(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), ArtifactError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

fn artifact_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Require an artifact file to exist, naming the stage that produces it.
pub fn require(path: &Path, produced_by: &'static str) -> Result<(), ArtifactError> {
    if !path.exists() {
        return Err(ArtifactError::MissingDependency {
            artifact: artifact_name(path),
            produced_by,
        });
    }
    Ok(())
}

fn check_hash(path: &Path, found: &str, cfg: &RunConfig) -> Result<(), ArtifactError> {
    let expected = cfg.config_hash();
    if found != expected {
        return Err(ArtifactError::HashMismatch {
            artifact: artifact_name(path),
            expected,
            found: found.to_string(),
        });
    }
    Ok(())
}

/// Write a JSONL artifact: header line first, then one record per line.
pub fn write_jsonl<T: Serialize>(
    path: &Path,
    header: &ArtifactHeader,
    records: &[T],
) -> Result<(), ArtifactError> {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Read a JSONL artifact, verifying the embedded config hash.
pub fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
    produced_by: &'static str,
    cfg: &RunConfig,
) -> Result<(ArtifactHeader, Vec<T>), ArtifactError> {
    require(path, produced_by)?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header_line = lines.next().ok_or_else(|| ArtifactError::Corrupt {
        artifact: artifact_name(path),
        reason: "empty file".into(),
    })?;
    let header: ArtifactHeader =
        serde_json::from_str(header_line).map_err(|e| ArtifactError::Corrupt {
            artifact: artifact_name(path),
            reason: format!("bad header: {e}"),
        })?;
    check_hash(path, &header.config_hash, cfg)?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(line).map_err(|e| ArtifactError::Corrupt {
                artifact: artifact_name(path),
                reason: format!("line {}: {e}", i + 2),
            })?,
        );
    }
    Ok((header, records))
}

/// Write a JSON artifact as `{"header": ..., "data": ...}`.
pub fn write_json<T: Serialize>(
    path: &Path,
    header: &ArtifactHeader,
    data: &T,
) -> Result<(), ArtifactError> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        header: &'a ArtifactHeader,
        data: &'a T,
    }
    let doc = Doc { header, data };
    let mut bytes = serde_json::to_vec_pretty(&doc).expect("document serializes");
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Read a JSON artifact, verifying the embedded config hash.
pub fn read_json<T: DeserializeOwned>(
    path: &Path,
    produced_by: &'static str,
    cfg: &RunConfig,
) -> Result<(ArtifactHeader, T), ArtifactError> {
    require(path, produced_by)?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    #[derive(Deserialize)]
    struct Doc<T> {
        header: ArtifactHeader,
        data: T,
    }
    let doc: Doc<T> = serde_json::from_str(&text).map_err(|e| ArtifactError::Corrupt {
        artifact: artifact_name(path),
        reason: e.to_string(),
    })?;
    check_hash(path, &doc.header.config_hash, cfg)?;
    Ok((doc.header, doc.data))
}

/// Write a CSV artifact with `# key: value` comment lines (config hash and
/// optional extras) before the header row.
pub fn write_csv(
    path: &Path,
    cfg: &RunConfig,
    extra_comments: &[(&str, String)],
    header_row: &str,
    rows: &[String],
) -> Result<(), ArtifactError> {
    let mut out = format!("# config_hash: {}\n", cfg.config_hash());
    for (key, value) in extra_comments {
        out.push_str(&format!("# {key}: {value}\n"));
    }
    out.push_str(header_row);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Read a CSV artifact written by `write_csv`: returns the comment map and
/// data rows (header row excluded), verifying the config hash.
pub fn read_csv(
    path: &Path,
    produced_by: &'static str,
    cfg: &RunConfig,
) -> Result<(std::collections::BTreeMap<String, String>, Vec<String>), ArtifactError> {
    require(path, produced_by)?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut comments = std::collections::BTreeMap::new();
    let mut rows = Vec::new();
    let mut header_seen = false;
    for line in text.lines() {
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.trim().split_once(':') {
                comments.insert(key.trim().to_string(), value.trim().to_string());
            }
            continue;
        }
        if !header_seen {
            header_seen = true; // header row
            continue;
        }
        if !line.trim().is_empty() {
            rows.push(line.to_string());
        }
    }
    let found = comments
        .get("config_hash")
        .cloned()
        .ok_or_else(|| ArtifactError::Corrupt {
            artifact: artifact_name(path),
            reason: "missing config_hash comment".into(),
        })?;
    check_hash(path, &found, cfg)?;
    Ok((comments, rows))
}

/// Checksum of a file's bytes, for non-interference assertions.
pub fn file_checksum(path: &Path) -> Result<String, ArtifactError> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
