use super::store::now_ms;
use super::{EraseConfig, EraseError, Eraser, JobError, JobFailure, JobRecord, JobStatus, JobStore, Stage, StoreEvent};
use crate::raster::{decode_png, encode_png, Mask, Rgb8Image};
use std::collections::VecDeque;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    /// Maximum number of queued (not yet running) jobs.
    pub capacity: usize,
    /// Log events between snapshot compactions.
    pub compact_every: usize,
    /// Start with the worker paused; see [`JobService::resume`].
    pub start_paused: bool,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self { capacity: 64, compact_every: 256, start_paused: false }
    }
}

#[derive(Default)]
struct Queue {
    ids: VecDeque<String>,
    busy: bool,
    paused: bool,
    shutdown: bool,
}

struct Inner {
    eraser: Eraser,
    store: RwLock<JobStore>,
    queue: Mutex<Queue>,
    wake: Condvar,
    capacity: usize,
}

/// FIFO job queue with one worker thread and a persistent store.
pub struct JobService {
    inner: Arc<Inner>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl JobService {
    /// Open the store under `dir`, fail jobs a previous process left
    /// running, re-queue the rest and start the worker.
    pub fn open(eraser: Eraser, dir: &Path, opts: ServiceOptions) -> Result<Self, JobError> {
        let mut store = JobStore::open(dir, opts.compact_every)?;
        let pending = store.recover()?;
        let queue = Queue { ids: pending.into(), paused: opts.start_paused, ..Queue::default() };
        let inner = Arc::new(Inner {
            eraser,
            store: RwLock::new(store),
            queue: Mutex::new(queue),
            wake: Condvar::new(),
            capacity: opts.capacity,
        });
        let worker_inner = Arc::clone(&inner);
        let handle = std::thread::Builder::new().name("erase-worker".into()).spawn(move || worker(&worker_inner))?;
        Ok(Self { inner, worker: Mutex::new(Some(handle)) })
    }

    pub fn eraser(&self) -> &Eraser {
        &self.inner.eraser
    }

    pub fn submit(&self, image: &Rgb8Image, mask: &Mask, config: EraseConfig) -> Result<JobRecord, JobError> {
        self.inner.eraser.check_inputs(image, mask, &config).map_err(JobError::Rejected)?;
        let mut queue = self.inner.queue.lock().expect("queue poisoned");
        if queue.ids.len() >= self.inner.capacity {
            return Err(JobError::QueueFull(queue.ids.len()));
        }
        let record = {
            let mut store = self.inner.store.write().expect("store poisoned");
            let id = store.next_id();
            std::fs::write(store.blob_path(&id, "input"), encode_png(image).map_err(|e| JobError::Store(e.to_string()))?)?;
            std::fs::write(store.blob_path(&id, "mask"), mask.to_png().map_err(|e| JobError::Store(e.to_string()))?)?;
            let record = JobRecord {
                id: id.clone(),
                status: JobStatus::Queued,
                config_hash: config.hash(),
                config,
                width: image.width(),
                height: image.height(),
                submitted_ms: now_ms(),
                started_ms: None,
                finished_ms: None,
                stage: None,
                completion_config_hash: None,
                completion_seq: None,
                error: None,
            };
            store.append(StoreEvent::Submitted { job: Box::new(record.clone()) })?;
            record
        };
        queue.ids.push_back(record.id.clone());
        self.inner.wake.notify_all();
        Ok(record)
    }

    pub fn get(&self, id: &str) -> Result<JobRecord, JobError> {
        let store = self.inner.store.read().expect("store poisoned");
        store.get(id).cloned().ok_or_else(|| JobError::NotFound(id.to_string()))
    }

    pub fn list(&self) -> Vec<JobRecord> {
        self.inner.store.read().expect("store poisoned").list()
    }

    /// PNG bytes of a finished job's result.
    pub fn result_png(&self, id: &str) -> Result<Option<Vec<u8>>, JobError> {
        let record = self.get(id)?;
        if record.status != JobStatus::Done {
            return Ok(None);
        }
        let path = self.inner.store.read().expect("store poisoned").blob_path(id, "result");
        Ok(Some(std::fs::read(path)?))
    }

    pub fn pause(&self) {
        self.inner.queue.lock().expect("queue poisoned").paused = true;
    }

    pub fn resume(&self) {
        self.inner.queue.lock().expect("queue poisoned").paused = false;
        self.inner.wake.notify_all();
    }

    /// Block until the queue is empty and the worker idle, or `timeout`.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut queue = self.inner.queue.lock().expect("queue poisoned");
        while !queue.ids.is_empty() || queue.busy {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            queue = self.inner.wake.wait_timeout(queue, deadline - now).expect("queue poisoned").0;
        }
        true
    }

    /// Let the running job finish, then stop the worker. Queued jobs stay
    /// in the store.
    pub fn shutdown(&self) {
        self.inner.queue.lock().expect("queue poisoned").shutdown = true;
        self.inner.wake.notify_all();
        if let Some(handle) = self.worker.lock().expect("worker poisoned").take() {
            let _ = handle.join();
        }
    }
}

impl Drop for JobService {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker(inner: &Inner) {
    loop {
        let id = {
            let mut queue = inner.queue.lock().expect("queue poisoned");
            loop {
                if queue.shutdown {
                    return;
                }
                if !queue.paused {
                    if let Some(id) = queue.ids.pop_front() {
                        queue.busy = true;
                        break id;
                    }
                }
                queue = inner.wake.wait(queue).expect("queue poisoned");
            }
        };
        if let Err(e) = run_job(inner, &id) {
            log::error!("job {id}: store failure: {e}");
        }
        inner.queue.lock().expect("queue poisoned").busy = false;
        inner.wake.notify_all();
    }
}

fn run_job(inner: &Inner, id: &str) -> Result<(), JobError> {
    let (record, input_path, mask_path, result_path) = {
        let mut store = inner.store.write().expect("store poisoned");
        store.append(StoreEvent::Started { id: id.to_string(), at_ms: now_ms() })?;
        let record = store.get(id).cloned().ok_or_else(|| JobError::NotFound(id.to_string()))?;
        (record, store.blob_path(id, "input"), store.blob_path(id, "mask"), store.blob_path(id, "result"))
    };
    let mut last_stage = Stage::Segment;
    let outcome = (|| -> Result<Rgb8Image, EraseError> {
        let image = decode_png(&std::fs::read(&input_path).map_err(|e| EraseError::at(Stage::Segment, e))?)
            .map_err(|e| EraseError::at(Stage::Segment, e))?;
        let mask = Mask::from_png(&std::fs::read(&mask_path).map_err(|e| EraseError::at(Stage::Segment, e))?)
            .map_err(|e| EraseError::at(Stage::Segment, e))?;
        inner.eraser.erase_with_progress(&image, &mask, &record.config, &mut |stage| {
            last_stage = stage;
            let ev = StoreEvent::Stage { id: id.to_string(), stage };
            if let Err(e) = inner.store.write().expect("store poisoned").append(ev) {
                log::warn!("job {id}: could not record stage {stage}: {e}");
            }
        })
    })();
    let mut store = inner.store.write().expect("store poisoned");
    let event = match outcome.and_then(|img| encode_png(&img).map_err(|e| EraseError::at(Stage::Composite, e))) {
        Ok(png) => {
            std::fs::write(&result_path, png)?;
            StoreEvent::Completed {
                id: id.to_string(),
                at_ms: now_ms(),
                config_hash: record.config.hash(),
                seq: store.next_completion_seq(),
            }
        }
        Err(e) => {
            log::warn!("job {id} failed: {e}");
            StoreEvent::Failed {
                id: id.to_string(),
                at_ms: now_ms(),
                error: JobFailure {
                    stage: e.stage().unwrap_or(last_stage),
                    kind: "StageFailure".into(),
                    message: e.to_string(),
                },
            }
        }
    };
    store.append(event)
}
