//! Job persistence: `snapshot.json` holds every record as of the last
//! compaction and `jobs.log` appends one JSON event per line since then.
//! Replaying an event is idempotent, so a crash between writing the snapshot
//! and truncating the log loses nothing.

use super::{EraseConfig, JobError, Stage};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

const SNAPSHOT_FILE: &str = "snapshot.json";
const LOG_FILE: &str = "jobs.log";
const BLOB_DIR: &str = "blobs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFailure {
    pub stage: Stage,
    /// `StageFailure` or `RestartInterrupted`.
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub status: JobStatus,
    pub config: EraseConfig,
    pub config_hash: String,
    pub width: u32,
    pub height: u32,
    pub submitted_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
    /// Last stage the worker entered.
    pub stage: Option<Stage>,
    /// Hash of the config the worker actually ran with.
    pub completion_config_hash: Option<String>,
    /// Position in the global completion order, starting at 1.
    pub completion_seq: Option<u64>,
    pub error: Option<JobFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StoreEvent {
    Submitted { job: Box<JobRecord> },
    Started { id: String, at_ms: u64 },
    Stage { id: String, stage: Stage },
    Completed { id: String, at_ms: u64, config_hash: String, seq: u64 },
    Failed { id: String, at_ms: u64, error: JobFailure },
}

#[derive(Default, Serialize, Deserialize)]
struct Snapshot {
    next_id: u64,
    completed: u64,
    jobs: BTreeMap<String, JobRecord>,
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn store_err(path: &Path, e: impl std::fmt::Display) -> JobError {
    JobError::Store(format!("{}: {e}", path.display()))
}

/// Durable job records plus the image blobs they refer to.
pub struct JobStore {
    dir: PathBuf,
    state: Snapshot,
    log: File,
    log_lines: usize,
    compact_every: usize,
}

impl JobStore {
    /// Open or create a store and replay its log.
    pub fn open(dir: &Path, compact_every: usize) -> Result<Self, JobError> {
        std::fs::create_dir_all(dir.join(BLOB_DIR))?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let mut state: Snapshot = if snap_path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&snap_path)?).map_err(|e| store_err(&snap_path, e))?
        } else {
            Snapshot::default()
        };
        let log_path = dir.join(LOG_FILE);
        let mut log_lines = 0;
        if log_path.exists() {
            for (n, line) in BufReader::new(File::open(&log_path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<StoreEvent>(&line) {
                    Ok(ev) => apply(&mut state, ev),
                    // a torn final line from a crash mid-append
                    Err(e) => log::warn!("{} line {}: skipping unreadable event: {e}", log_path.display(), n + 1),
                }
                log_lines += 1;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Self { dir: dir.to_path_buf(), state, log, log_lines, compact_every: compact_every.max(1) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn blob_path(&self, id: &str, kind: &str) -> PathBuf {
        self.dir.join(BLOB_DIR).join(format!("{id}.{kind}.png"))
    }

    pub fn next_id(&mut self) -> String {
        self.state.next_id += 1;
        format!("job-{:08}", self.state.next_id)
    }

    pub fn next_completion_seq(&self) -> u64 {
        self.state.completed + 1
    }

    pub fn get(&self, id: &str) -> Option<&JobRecord> {
        self.state.jobs.get(id)
    }

    /// All records in submission order.
    pub fn list(&self) -> Vec<JobRecord> {
        self.state.jobs.values().cloned().collect()
    }

    pub fn append(&mut self, event: StoreEvent) -> Result<(), JobError> {
        let mut line = serde_json::to_string(&event).expect("event serializes");
        line.push('\n');
        self.log.write_all(line.as_bytes())?;
        self.log.flush()?;
        apply(&mut self.state, event);
        self.log_lines += 1;
        if self.log_lines >= self.compact_every {
            self.compact()?;
        }
        Ok(())
    }

    /// Fold the log into a fresh snapshot and truncate the log.
    pub fn compact(&mut self) -> Result<(), JobError> {
        let snap_path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join("snapshot.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(&self.state).expect("snapshot serializes"))?;
        std::fs::rename(&tmp, &snap_path)?;
        self.log = OpenOptions::new().create(true).write(true).truncate(true).open(self.dir.join(LOG_FILE))?;
        self.log_lines = 0;
        Ok(())
    }

    /// Mark every running job as failed because the process restarted and
    /// return the queued ids in submission order.
    pub fn recover(&mut self) -> Result<Vec<String>, JobError> {
        let interrupted: Vec<(String, Stage)> = self
            .state
            .jobs
            .values()
            .filter(|j| j.status == JobStatus::Running)
            .map(|j| (j.id.clone(), j.stage.unwrap_or(Stage::Segment)))
            .collect();
        for (id, stage) in interrupted {
            log::warn!("job {id} was running at shutdown; marking failed");
            self.append(StoreEvent::Failed {
                id,
                at_ms: now_ms(),
                error: JobFailure {
                    stage,
                    kind: "RestartInterrupted".into(),
                    message: "service restarted while the job was running".into(),
                },
            })?;
        }
        Ok(self.state.jobs.values().filter(|j| j.status == JobStatus::Queued).map(|j| j.id.clone()).collect())
    }
}

fn apply(state: &mut Snapshot, event: StoreEvent) {
    match event {
        StoreEvent::Submitted { job } => {
            if let Some(n) = job.id.strip_prefix("job-").and_then(|n| n.parse::<u64>().ok()) {
                state.next_id = state.next_id.max(n);
            }
            state.jobs.insert(job.id.clone(), *job);
        }
        StoreEvent::Started { id, at_ms } => {
            if let Some(j) = state.jobs.get_mut(&id) {
                j.status = JobStatus::Running;
                j.started_ms = Some(at_ms);
            }
        }
        StoreEvent::Stage { id, stage } => {
            if let Some(j) = state.jobs.get_mut(&id) {
                j.stage = Some(stage);
            }
        }
        StoreEvent::Completed { id, at_ms, config_hash, seq } => {
            if let Some(j) = state.jobs.get_mut(&id) {
                j.status = JobStatus::Done;
                j.finished_ms = Some(at_ms);
                j.completion_config_hash = Some(config_hash);
                j.completion_seq = Some(seq);
            }
            state.completed = state.completed.max(seq);
        }
        StoreEvent::Failed { id, at_ms, error } => {
            if let Some(j) = state.jobs.get_mut(&id) {
                j.status = JobStatus::Failed;
                j.finished_ms = Some(at_ms);
                j.stage = Some(error.stage);
                j.error = Some(error);
            }
        }
    }
}
