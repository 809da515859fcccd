//! Job submission and the worker pool.

use std::path::PathBuf;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use compass_core::evaluation::OrientationRegressor;
use compass_core::training::Checkpoint;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{validate_request, Engine};
use crate::error::{ErrorBody, ServiceResult};
use crate::jobs::{Job, JobKind, JobStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub checkpoint: Option<PathBuf>,
    /// Holds `jobs.jsonl`, `images/` and `reports/`.
    pub data_dir: PathBuf,
    pub host: String,
    pub port: u16,
    pub workers: usize,
    pub regressor: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data_dir: PathBuf::from("compass-data"),
            host: "127.0.0.1".into(),
            port: 8080,
            workers: 1,
            regressor: None,
        }
    }
}

pub struct App {
    pub store: Arc<JobStore>,
    pub engine: Arc<Engine>,
    queue: Mutex<Sender<String>>,
}

impl std::fmt::Debug for App {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("App").field("engine", &self.engine).finish()
    }
}

fn worker(store: Arc<JobStore>, engine: Arc<Engine>, rx: Arc<Mutex<Receiver<String>>>) {
    loop {
        let next = rx.lock().expect("queue lock").recv();
        let Ok(id) = next else { return };
        let Ok(job) = store.start(&id) else { continue };
        let outcome = engine.run(&job);
        // A failed journal write leaves the job running; the next restart
        // closes it as interrupted.
        let _ = match outcome {
            Ok(result) => store.finish(&id, result),
            Err(e) => store.fail(&id, &ErrorBody::from(&e).message),
        };
    }
}

impl App {
    /// Opens the journal, starts `workers` threads and requeues jobs left
    /// queued by a previous run.
    pub fn start(
        checkpoint: &Checkpoint,
        regressor: Option<OrientationRegressor>,
        data_dir: &std::path::Path,
        workers: usize,
    ) -> ServiceResult<Arc<Self>> {
        let engine = Arc::new(Engine::new(checkpoint, regressor, data_dir)?);
        let (store, queued) = JobStore::open(&data_dir.join("jobs.jsonl"))?;
        let store = Arc::new(store);
        let (tx, rx) = channel();
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..workers.max(1) {
            let (s, e, r) = (store.clone(), engine.clone(), rx.clone());
            std::thread::spawn(move || worker(s, e, r));
        }
        for id in queued {
            tx.send(id).expect("workers are running");
        }
        Ok(Arc::new(Self {
            store,
            engine,
            queue: Mutex::new(tx),
        }))
    }

    /// Validates a `{"kind", "request"}` envelope and queues the job.
    pub fn submit(&self, body: &Value) -> std::result::Result<Job, ErrorBody> {
        let Some(obj) = body.as_object() else {
            return Err(ErrorBody::validation("", &[": expected a JSON object".into()]));
        };
        let mut problems = Vec::new();
        for k in obj.keys().filter(|k| !matches!(k.as_str(), "kind" | "request")) {
            problems.push(format!("{k}: unknown field"));
        }
        let kind = match obj.get("kind") {
            None => {
                problems.push("kind: missing field".into());
                None
            }
            Some(Value::String(s)) => {
                let k = JobKind::parse(s);
                if k.is_none() {
                    problems.push(format!("kind: unknown job kind `{s}` (generate, personalize, evaluate)"));
                }
                k
            }
            Some(_) => {
                problems.push("kind: expected a string".into());
                None
            }
        };
        let request = obj.get("request");
        if request.is_none() {
            problems.push("request: missing field".into());
        }
        if !problems.is_empty() {
            return Err(ErrorBody::validation("", &problems));
        }
        let (kind, request) = (kind.expect("checked"), request.expect("checked"));
        validate_request(kind, request)?;
        let job = self.store.create(kind, request.clone()).map_err(|e| ErrorBody::from(&e))?;
        self.queue
            .lock()
            .expect("queue lock")
            .send(job.id.clone())
            .map_err(|_| ErrorBody::new("unavailable", "job workers have stopped"))?;
        Ok(job)
    }
}
