//! JSON artifacts, checkpoints and configuration fingerprints.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// First 16 hex digits of the SHA-256 of the value's JSON encoding.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration serialises to JSON");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// A trained model plus the provenance needed to reproduce it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub model: T,
}

impl<T: Serialize + DeserializeOwned> Checkpoint<T> {
    pub fn new(kind: &str, seed: u64, config_hash: String, model: T) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            seed,
            config_hash,
            model,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    /// Loads a checkpoint, failing with a configuration error if the file
    /// is missing or holds a different kind of model.
    pub fn load(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing {kind} checkpoint: {}",
                path.display()
            )));
        }
        let ck: Self = read_json(path)?;
        if ck.kind != kind {
            return Err(Error::Config(format!(
                "{} holds a '{}' checkpoint, expected '{kind}'",
                path.display(),
                ck.kind
            )));
        }
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ck.format_version
            )));
        }
        Ok(ck)
    }
}
