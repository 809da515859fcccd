//! Job records and the append-only journal that stores them.
//!
//! Every state change is one JSON line. Replaying the journal rebuilds the
//! store; jobs that were running when the process died are closed as
//! failed (`interrupted`) and queued ones are handed back for requeueing.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ServiceError, ServiceResult};

pub const JOB_SCHEMA: &str = "compass.job/1";
pub const INTERRUPTED: &str = "interrupted";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Generate,
    Personalize,
    Evaluate,
}

impl JobKind {
    pub const ALL: [JobKind; 3] = [JobKind::Generate, JobKind::Personalize, JobKind::Evaluate];

    pub fn as_str(self) -> &'static str {
        match self {
            JobKind::Generate => "generate",
            JobKind::Personalize => "personalize",
            JobKind::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// Ordered so that a transition is legal only when it moves forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub schema: String,
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub request: Value,
    pub result: Option<Value>,
    pub error: Option<String>,
    /// Unix seconds.
    pub created_at: f64,
    pub updated_at: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum Event {
    Created {
        id: String,
        kind: JobKind,
        request: Value,
        at: f64,
    },
    Running {
        id: String,
        at: f64,
    },
    Done {
        id: String,
        result: Value,
        at: f64,
    },
    Failed {
        id: String,
        error: String,
        at: f64,
    },
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

struct Inner {
    file: File,
    jobs: BTreeMap<String, Job>,
    created: u64,
}

pub struct JobStore {
    path: PathBuf,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for JobStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JobStore").field("path", &self.path).finish()
    }
}

fn apply(jobs: &mut BTreeMap<String, Job>, created: &mut u64, ev: Event) -> ServiceResult<()> {
    let (id, status, at) = match &ev {
        Event::Created { id, kind, request, at } => {
            if jobs.contains_key(id) {
                return Err(ServiceError::Journal(format!("job {id} created twice")));
            }
            *created += 1;
            jobs.insert(
                id.clone(),
                Job {
                    schema: JOB_SCHEMA.into(),
                    id: id.clone(),
                    kind: *kind,
                    status: JobStatus::Queued,
                    request: request.clone(),
                    result: None,
                    error: None,
                    created_at: *at,
                    updated_at: *at,
                },
            );
            return Ok(());
        }
        Event::Running { id, at } => (id, JobStatus::Running, *at),
        Event::Done { id, at, .. } => (id, JobStatus::Done, *at),
        Event::Failed { id, at, .. } => (id, JobStatus::Failed, *at),
    };
    let job = jobs
        .get_mut(id)
        .ok_or_else(|| ServiceError::Journal(format!("event for unknown job {id}")))?;
    if job.status.is_terminal() || status <= job.status {
        return Err(ServiceError::Transition {
            id: id.clone(),
            from: job.status,
            to: status,
        });
    }
    job.status = status;
    job.updated_at = at;
    match ev {
        Event::Done { result, .. } => job.result = Some(result),
        Event::Failed { error, .. } => job.error = Some(error),
        _ => {}
    }
    Ok(())
}

impl JobStore {
    /// Opens (or creates) the journal at `path`. Returns the store and the
    /// ids of jobs that were still queued, oldest first.
    pub fn open(path: &Path) -> ServiceResult<(Self, Vec<String>)> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir, e))?;
        }
        let mut jobs = BTreeMap::new();
        let mut created = 0;
        let mut order = Vec::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))?;
            let mut offset = 0;
            for (n, line) in text.split_inclusive('\n').enumerate() {
                let complete = line.ends_with('\n');
                if !line.trim().is_empty() {
                    match serde_json::from_str::<Event>(line) {
                        Ok(ev) if complete => {
                            if let Event::Created { id, .. } = &ev {
                                order.push(id.clone());
                            }
                            apply(&mut jobs, &mut created, ev)?;
                        }
                        // A torn last line from a crash mid-write is cut off.
                        _ if !complete => {
                            truncate(path, offset)?;
                            break;
                        }
                        Ok(_) => unreachable!(),
                        Err(e) => return Err(ServiceError::Journal(format!("line {}: {e}", n + 1))),
                    }
                }
                offset += line.len();
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ServiceError::io(path, e))?;
        let store = Self {
            path: path.to_path_buf(),
            inner: Mutex::new(Inner { file, jobs, created }),
        };
        let interrupted: Vec<String> = order
            .iter()
            .filter(|id| store.get(id).is_some_and(|j| j.status == JobStatus::Running))
            .cloned()
            .collect();
        for id in interrupted {
            store.fail(&id, INTERRUPTED)?;
        }
        let queued = order
            .into_iter()
            .filter(|id| store.get(id).is_some_and(|j| j.status == JobStatus::Queued))
            .collect();
        Ok((store, queued))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn record(&self, inner: &mut Inner, ev: Event) -> ServiceResult<()> {
        let mut probe = inner.jobs.clone();
        let mut created = inner.created;
        apply(&mut probe, &mut created, ev.clone())?;
        let mut line = serde_json::to_string(&ev)?;
        line.push('\n');
        inner
            .file
            .write_all(line.as_bytes())
            .and_then(|_| inner.file.sync_data())
            .map_err(|e| ServiceError::io(&self.path, e))?;
        inner.jobs = probe;
        inner.created = created;
        Ok(())
    }

    pub fn create(&self, kind: JobKind, request: Value) -> ServiceResult<Job> {
        let mut inner = self.inner.lock().expect("job store lock");
        let id = format!("job-{:06}", inner.created + 1);
        self.record(
            &mut inner,
            Event::Created {
                id: id.clone(),
                kind,
                request,
                at: now(),
            },
        )?;
        Ok(inner.jobs[&id].clone())
    }

    pub fn start(&self, id: &str) -> ServiceResult<Job> {
        self.transition(Event::Running { id: id.into(), at: now() }, id)
    }

    pub fn finish(&self, id: &str, result: Value) -> ServiceResult<Job> {
        self.transition(
            Event::Done {
                id: id.into(),
                result,
                at: now(),
            },
            id,
        )
    }

    pub fn fail(&self, id: &str, error: &str) -> ServiceResult<Job> {
        self.transition(
            Event::Failed {
                id: id.into(),
                error: error.into(),
                at: now(),
            },
            id,
        )
    }

    fn transition(&self, ev: Event, id: &str) -> ServiceResult<Job> {
        let mut inner = self.inner.lock().expect("job store lock");
        self.record(&mut inner, ev)?;
        Ok(inner.jobs[id].clone())
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.inner.lock().expect("job store lock").jobs.get(id).cloned()
    }

    pub fn list(&self) -> Vec<Job> {
        self.inner.lock().expect("job store lock").jobs.values().cloned().collect()
    }
}

fn truncate(path: &Path, len: usize) -> ServiceResult<()> {
    let f = OpenOptions::new().write(true).open(path).map_err(|e| ServiceError::io(path, e))?;
    f.set_len(len as u64).map_err(|e| ServiceError::io(path, e))
}
