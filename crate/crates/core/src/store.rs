//! Append-only run log.
//!
//! Layout: `<root>/<run_id>/run.json` (metadata), `<root>/<run_id>/events.jsonl`
//! (one event per line, `seq` strictly increasing from 1) and
//! `<root>/<run_id>/blobs/<sha256>` for large artifacts such as prompts and
//! candidate sources.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run `{0}` is closed")]
    RunClosed(String),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("storage error: {0}")]
    Storage(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TaskLoaded,
    LlmCall,
    SandboxResult,
    CandidateScored,
    BeamLevel,
    GroupSampled,
    TrainStep,
    Outcome,
    Warning,
}

impl EventKind {
    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub kind: EventKind,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub started_at: DateTime<Utc>,
    pub command: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub closed_at: Option<DateTime<Utc>>,
}

/// Anything pipeline stages can report events to.
pub trait EventSink: Send + Sync {
    fn record(&self, kind: EventKind, payload: serde_json::Value) -> Result<u64, StoreError>;

    /// Stores a blob and returns its content hash.
    fn put_blob(&self, bytes: &[u8]) -> Result<String, StoreError> {
        Ok(content_hash(bytes))
    }
}

/// Sink that drops everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&self, _kind: EventKind, _payload: serde_json::Value) -> Result<u64, StoreError> {
        Ok(0)
    }
}

/// In-memory sink, used by tests and by callers that want to inspect events.
#[derive(Debug, Default)]
pub struct MemorySink {
    events: Mutex<Vec<Event>>,
}

impl MemorySink {
    pub fn events(&self) -> Vec<Event> {
        self.events.lock().unwrap().clone()
    }

    pub fn of_kind(&self, kind: EventKind) -> Vec<Event> {
        self.events()
            .into_iter()
            .filter(|e| e.kind == kind)
            .collect()
    }
}

impl EventSink for MemorySink {
    fn record(&self, kind: EventKind, payload: serde_json::Value) -> Result<u64, StoreError> {
        let mut events = self.events.lock().unwrap();
        let seq = events.len() as u64 + 1;
        events.push(Event {
            seq,
            timestamp: Utc::now(),
            kind,
            payload,
        });
        Ok(seq)
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    /// Opens a fresh run with a generated id.
    pub fn open(&self, command: &str, config: serde_json::Value) -> Result<RunHandle, StoreError> {
        let run_id = format!(
            "{}-{}",
            Utc::now().format("%Y%m%dT%H%M%S"),
            &uuid::Uuid::new_v4().simple().to_string()[..8]
        );
        self.open_with_id(&run_id, command, config)
    }

    pub fn open_with_id(
        &self,
        run_id: &str,
        command: &str,
        config: serde_json::Value,
    ) -> Result<RunHandle, StoreError> {
        let dir = self.run_dir(run_id);
        if dir.exists() {
            return Err(StoreError::Storage(format!(
                "run directory {} already exists",
                dir.display()
            )));
        }
        std::fs::create_dir_all(dir.join("blobs"))?;
        let meta = RunMeta {
            run_id: run_id.to_string(),
            started_at: Utc::now(),
            command: command.to_string(),
            config,
            closed_at: None,
        };
        write_meta(&dir, &meta)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("events.jsonl"))?;
        Ok(RunHandle {
            dir,
            inner: Mutex::new(Writer {
                meta,
                file: Some(file),
                next_seq: 1,
            }),
        })
    }

    pub fn meta(&self, run_id: &str) -> Result<RunMeta, StoreError> {
        let path = self.run_dir(run_id).join("run.json");
        if !path.exists() {
            return Err(StoreError::UnknownRun(run_id.to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| StoreError::Storage(e.to_string()))
    }

    /// Events of a run in sequence order, optionally restricted to one kind.
    ///
    /// Safe to call while the run is still being written; a trailing partial
    /// line is ignored, so readers see a prefix.
    pub fn replay(&self, run_id: &str, kind: Option<EventKind>) -> Result<Vec<Event>, StoreError> {
        let dir = self.run_dir(run_id);
        if !dir.join("run.json").exists() {
            return Err(StoreError::UnknownRun(run_id.to_string()));
        }
        let path = dir.join("events.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut events = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Event>(&line) {
                Ok(event) => {
                    if kind.is_none_or(|k| k == event.kind) {
                        events.push(event);
                    }
                }
                Err(_) => break,
            }
        }
        Ok(events)
    }

    pub fn blob(&self, run_id: &str, hash: &str) -> Result<Vec<u8>, StoreError> {
        Ok(std::fs::read(self.run_dir(run_id).join("blobs").join(hash))?)
    }

    pub fn list_runs(&self) -> Result<Vec<String>, StoreError> {
        if !self.root.exists() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<String> = std::fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("run.json").exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }
}

fn write_meta(dir: &Path, meta: &RunMeta) -> Result<(), StoreError> {
    let text = serde_json::to_string_pretty(meta).map_err(|e| StoreError::Storage(e.to_string()))?;
    std::fs::write(dir.join("run.json"), text)?;
    Ok(())
}

struct Writer {
    meta: RunMeta,
    file: Option<File>,
    next_seq: u64,
}

/// Writer side of one run. All producers share it; the mutex serializes
/// appends so sequence numbers follow write order.
pub struct RunHandle {
    dir: PathBuf,
    inner: Mutex<Writer>,
}

impl std::fmt::Debug for RunHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunHandle").field("dir", &self.dir).finish()
    }
}

impl RunHandle {
    pub fn run_id(&self) -> String {
        self.inner.lock().unwrap().meta.run_id.clone()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&self, kind: EventKind, payload: serde_json::Value) -> Result<u64, StoreError> {
        let mut w = self.inner.lock().unwrap();
        let run_id = w.meta.run_id.clone();
        let seq = w.next_seq;
        let file = w.file.as_mut().ok_or(StoreError::RunClosed(run_id))?;
        let event = Event {
            seq,
            timestamp: Utc::now(),
            kind,
            payload,
        };
        let mut line =
            serde_json::to_string(&event).map_err(|e| StoreError::Storage(e.to_string()))?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.flush()?;
        w.next_seq += 1;
        Ok(seq)
    }

    pub fn close(&self) -> Result<(), StoreError> {
        let mut w = self.inner.lock().unwrap();
        let Some(file) = w.file.take() else {
            return Err(StoreError::RunClosed(w.meta.run_id.clone()));
        };
        file.sync_all()?;
        w.meta.closed_at = Some(Utc::now());
        write_meta(&self.dir, &w.meta)
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().unwrap().file.is_none()
    }
}

impl EventSink for RunHandle {
    fn record(&self, kind: EventKind, payload: serde_json::Value) -> Result<u64, StoreError> {
        self.append(kind, payload)
    }

    fn put_blob(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let hash = content_hash(bytes);
        let path = self.dir.join("blobs").join(&hash);
        if !path.exists() {
            std::fs::write(path, bytes)?;
        }
        Ok(hash)
    }
}

/// Records an event, logging rather than propagating sink failures.
pub fn emit(sink: &dyn EventSink, kind: EventKind, payload: serde_json::Value) {
    if let Err(e) = sink.record(kind, payload) {
        tracing::warn!("failed to record {kind:?} event: {e}");
    }
}
