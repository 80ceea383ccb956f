use super::{Adam, LoraSet, PlaceholderToken, TuningError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Completed optimizer steps.
    pub step: u64,
    pub placeholder: PlaceholderToken,
    pub adapters: LoraSet,
    pub optimizer: Adam,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TuningError> {
        #[derive(Deserialize)]
        struct Header {
            version: Option<u32>,
        }
        let header: Header =
            serde_json::from_str(text).map_err(|e| TuningError::IncompatibleCheckpoint(e.to_string()))?;
        match header.version {
            Some(CHECKPOINT_VERSION) => {}
            Some(v) => return Err(TuningError::IncompatibleCheckpoint(format!("version {v}"))),
            None => return Err(TuningError::IncompatibleCheckpoint("missing version".into())),
        }
        serde_json::from_str(text).map_err(|e| TuningError::IncompatibleCheckpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TuningError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Write through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), TuningError> {
        let fail = |e: std::io::Error| TuningError::CheckpointWriteFailure {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()).map_err(fail)?;
        std::fs::rename(&tmp, path).map_err(fail)
    }
}

/// Receives checkpoints from [`super::train`].
pub trait CheckpointSink {
    fn save(&mut self, checkpoint: &Checkpoint) -> Result<(), TuningError>;
}

/// Writes `step-XXXXXXXX.json` files into a directory.
#[derive(Clone, Debug)]
pub struct DirCheckpointSink {
    dir: PathBuf,
}

impl DirCheckpointSink {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step-{step:08}.json"))
    }

    /// Newest checkpoint in the directory, if any.
    pub fn latest(&self) -> Result<Option<PathBuf>, TuningError> {
        if !self.dir.exists() {
            return Ok(None);
        }
        let mut names: Vec<PathBuf> = std::fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("step-") && n.ends_with(".json"))
            })
            .collect();
        names.sort();
        Ok(names.pop())
    }
}

impl CheckpointSink for DirCheckpointSink {
    fn save(&mut self, checkpoint: &Checkpoint) -> Result<(), TuningError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| TuningError::CheckpointWriteFailure {
            path: self.dir.display().to_string(),
            reason: e.to_string(),
        })?;
        checkpoint.save(&self.path_for(checkpoint.step))
    }
}

/// Keeps checkpoints in memory.
#[derive(Clone, Debug, Default)]
pub struct MemoryCheckpointSink {
    pub saved: Vec<Checkpoint>,
}

impl CheckpointSink for MemoryCheckpointSink {
    fn save(&mut self, checkpoint: &Checkpoint) -> Result<(), TuningError> {
        self.saved.push(checkpoint.clone());
        Ok(())
    }
}
