//! Sidecar metadata recording which configuration produced an artifact.
//!
//! `<file>.meta.json` holds the producing stage, the hash of its
//! configuration and the SHA-256 of the artifact bytes. Readers verify both
//! and log a warning on mismatch; a missing sidecar is not an error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::fingerprint;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub stage: String,
    pub config_hash: String,
    pub content_sha256: String,
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

/// Hex SHA-256 of the canonical JSON of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(hex::encode(fingerprint(&serde_json::to_vec(config)?)))
}

pub fn write_meta(artifact: &Path, stage: &str, config_hash: &str) -> Result<()> {
    let bytes = std::fs::read(artifact).map_err(|source| Error::File { path: artifact.to_path_buf(), source })?;
    let meta = ArtifactMeta {
        stage: stage.to_string(),
        config_hash: config_hash.to_string(),
        content_sha256: hex::encode(fingerprint(&bytes)),
    };
    let path = meta_path(artifact);
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|source| Error::File { path, source })
}

/// Problems found with an artifact's sidecar, as human-readable warnings.
pub fn check_meta(artifact: &Path, expected_config_hash: Option<&str>) -> Vec<String> {
    let path = meta_path(artifact);
    let Ok(text) = std::fs::read_to_string(&path) else {
        return Vec::new();
    };
    let meta: ArtifactMeta = match serde_json::from_str(&text) {
        Ok(m) => m,
        Err(e) => return vec![format!("{}: unreadable metadata: {e}", path.display())],
    };
    let mut warnings = Vec::new();
    if let Ok(bytes) = std::fs::read(artifact) {
        if hex::encode(fingerprint(&bytes)) != meta.content_sha256 {
            warnings.push(format!("{}: contents changed since it was written by {}", artifact.display(), meta.stage));
        }
    }
    if let Some(h) = expected_config_hash {
        if h != meta.config_hash {
            warnings.push(format!(
                "{}: produced by {} under config {}, current config is {}",
                artifact.display(),
                meta.stage,
                &meta.config_hash[..meta.config_hash.len().min(12)],
                &h[..h.len().min(12)]
            ));
        }
    }
    warnings
}

/// Logs every warning from [`check_meta`].
pub fn verify(artifact: &Path, expected_config_hash: Option<&str>) {
    for w in check_meta(artifact, expected_config_hash) {
        log::warn!("{w}");
    }
}
