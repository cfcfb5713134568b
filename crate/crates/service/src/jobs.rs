//! In-process job table with a bounded worker pool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use forgeval_core::config::FieldError;
use forgeval_core::pipeline::{ErrorClass, JobSpec};
use forgeval_core::progress::Observer;
use forgeval_core::schema::write_atomic;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::{Notify, Semaphore};

pub const DEFAULT_WORKERS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed)
    }

    /// queued → running → {succeeded, failed}. A queued job may also fail
    /// directly (for example when the service restarts).
    pub fn can_move_to(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Queued, JobStatus::Failed)
                | (JobStatus::Running, JobStatus::Succeeded)
                | (JobStatus::Running, JobStatus::Failed)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub class: ErrorClass,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

/// Serializable view of a job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub kind: String,
    pub status: JobStatus,
    pub progress: f64,
    pub run_dir: PathBuf,
    pub submitted_config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<JobError>,
    pub submitted_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    #[serde(default)]
    pub log_len: usize,
}

pub struct Job {
    record: Mutex<JobRecord>,
    logs: Mutex<Vec<String>>,
    notify: Notify,
}

fn now() -> String {
    // same timestamp shape as run manifests
    forgeval_core::schema::DatasetManifest::new("", 0).created_at
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Job {
    fn new(record: JobRecord, logs: Vec<String>) -> Self {
        Job { record: Mutex::new(record), logs: Mutex::new(logs), notify: Notify::new() }
    }

    pub fn id(&self) -> String {
        lock(&self.record).job_id.clone()
    }

    pub fn snapshot(&self) -> JobRecord {
        let mut r = lock(&self.record).clone();
        r.log_len = lock(&self.logs).len();
        r
    }

    pub fn status(&self) -> JobStatus {
        lock(&self.record).status
    }

    /// Applies a status transition; illegal transitions are refused.
    pub fn transition(&self, next: JobStatus) -> bool {
        let mut r = lock(&self.record);
        if !r.status.can_move_to(next) {
            return false;
        }
        r.status = next;
        match next {
            JobStatus::Running => r.started_at = Some(now()),
            s if s.is_terminal() => {
                r.finished_at = Some(now());
                if s == JobStatus::Succeeded {
                    r.progress = 1.0;
                }
            }
            _ => {}
        }
        drop(r);
        self.notify.notify_waiters();
        true
    }

    pub fn append_log(&self, line: &str) {
        lock(&self.logs).push(line.to_string());
        self.notify.notify_waiters();
    }

    /// Lines from index `since` on, and the index to continue from.
    pub fn logs_since(&self, since: usize) -> (Vec<String>, usize) {
        let logs = lock(&self.logs);
        let start = since.min(logs.len());
        (logs[start..].to_vec(), logs.len())
    }

    /// Waits until a log line is appended or the status changes, if nothing
    /// is available at `since` yet.
    pub async fn wait_for(&self, since: usize, wait: std::time::Duration) {
        let notified = self.notify.notified();
        tokio::pin!(notified);
        notified.as_mut().enable();
        if lock(&self.logs).len() > since || self.status().is_terminal() {
            return;
        }
        let _ = tokio::time::timeout(wait, notified).await;
    }

    fn set_progress(&self, p: f64) {
        let mut r = lock(&self.record);
        if !r.status.is_terminal() {
            r.progress = p.clamp(0.0, 1.0);
        }
    }

    fn finish(&self, result: Result<Value, JobError>) {
        {
            let mut r = lock(&self.record);
            match &result {
                Ok(v) => r.result = Some(v.clone()),
                Err(e) => r.error = Some(e.clone()),
            }
        }
        self.transition(if result.is_ok() { JobStatus::Succeeded } else { JobStatus::Failed });
    }
}

struct JobObserver(Arc<Job>);

impl Observer for JobObserver {
    fn log(&self, line: &str) {
        log::info!("[{}] {line}", self.0.id());
        self.0.append_log(line);
    }

    fn progress(&self, fraction: f64) {
        self.0.set_progress(fraction);
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum SubmitError {
    Duplicate(String),
    InvalidId(String),
}

/// Job table, worker pool and artifact root.
pub struct JobStore {
    home: PathBuf,
    jobs: RwLock<BTreeMap<String, Arc<Job>>>,
    permits: Arc<Semaphore>,
}

pub fn valid_job_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl JobStore {
    /// Opens (creating if needed) `home/jobs` and `home/runs`, reloading
    /// earlier jobs. Jobs that were still queued or running are marked failed.
    pub fn open(home: &Path, workers: usize) -> std::io::Result<Arc<Self>> {
        fs::create_dir_all(home.join("jobs"))?;
        fs::create_dir_all(home.join("runs"))?;
        let store = JobStore {
            home: home.to_path_buf(),
            jobs: RwLock::new(BTreeMap::new()),
            permits: Arc::new(Semaphore::new(workers.max(1))),
        };
        let mut entries: Vec<PathBuf> = fs::read_dir(home.join("jobs"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        entries.sort();
        for path in entries {
            let Ok(text) = fs::read_to_string(&path) else { continue };
            let Ok(mut record) = serde_json::from_str::<JobRecord>(&text) else {
                log::warn!("skipping unreadable job record {}", path.display());
                continue;
            };
            let logs: Vec<String> = fs::read_to_string(path.with_extension("log"))
                .map(|t| t.lines().map(str::to_string).collect())
                .unwrap_or_default();
            if !record.status.is_terminal() {
                record.status = JobStatus::Failed;
                record.error = Some(JobError {
                    class: ErrorClass::Backend,
                    message: "service restarted before the job finished".into(),
                    fields: vec![],
                });
            }
            let job = Arc::new(Job::new(record, logs));
            store.persist(&job);
            store.jobs.write().unwrap_or_else(|p| p.into_inner()).insert(job.id(), job);
        }
        Ok(Arc::new(store))
    }

    pub fn home(&self) -> &Path {
        &self.home
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.home.join("runs").join(id)
    }

    pub fn get(&self, id: &str) -> Option<Arc<Job>> {
        self.jobs.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }

    pub fn list(&self) -> Vec<JobRecord> {
        self.jobs.read().unwrap_or_else(|p| p.into_inner()).values().map(|j| j.snapshot()).collect()
    }

    fn persist(&self, job: &Job) {
        let record = job.snapshot();
        let dir = self.home.join("jobs");
        let body = serde_json::to_string_pretty(&record).expect("job record serializes") + "\n";
        if let Err(e) = write_atomic(&dir.join(format!("{}.json", record.job_id)), body.as_bytes()) {
            log::warn!("cannot persist job {}: {e}", record.job_id);
        }
        if record.status.is_terminal() {
            let (lines, _) = job.logs_since(0);
            let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
            if let Err(e) = write_atomic(&dir.join(format!("{}.log", record.job_id)), text.as_bytes()) {
                log::warn!("cannot persist log of job {}: {e}", record.job_id);
            }
        }
    }

    /// Queues a job. Must be called from within a tokio runtime.
    pub fn submit(
        self: &Arc<Self>,
        job_id: Option<String>,
        spec: JobSpec,
        submitted_config: Value,
    ) -> Result<Arc<Job>, SubmitError> {
        let id = job_id.unwrap_or_else(|| format!("job-{}", uuid::Uuid::new_v4().simple()));
        if !valid_job_id(&id) {
            return Err(SubmitError::InvalidId(id));
        }
        let run_dir = self.run_dir(&id);
        let job = {
            let mut jobs = self.jobs.write().unwrap_or_else(|p| p.into_inner());
            if jobs.contains_key(&id) || run_dir.exists() {
                return Err(SubmitError::Duplicate(id));
            }
            let record = JobRecord {
                job_id: id.clone(),
                kind: spec.kind().to_string(),
                status: JobStatus::Queued,
                progress: 0.0,
                run_dir: run_dir.clone(),
                submitted_config,
                result: None,
                error: None,
                submitted_at: now(),
                started_at: None,
                finished_at: None,
                log_len: 0,
            };
            let job = Arc::new(Job::new(record, Vec::new()));
            jobs.insert(id.clone(), job.clone());
            job
        };
        self.persist(&job);
        let store = self.clone();
        let worker_job = job.clone();
        tokio::spawn(async move {
            let Ok(_permit) = store.permits.clone().acquire_owned().await else { return };
            worker_job.transition(JobStatus::Running);
            store.persist(&worker_job);
            let observer = JobObserver(worker_job.clone());
            let outcome = tokio::task::spawn_blocking(move || {
                observer.log(&format!("{} job started", spec.kind()));
                spec.run(&run_dir, &observer).map_err(|e| JobError {
                    class: e.class(),
                    message: e.to_string(),
                    fields: e.field_errors().to_vec(),
                })
            })
            .await
            .unwrap_or_else(|e| {
                Err(JobError { class: ErrorClass::Backend, message: format!("job panicked: {e}"), fields: vec![] })
            });
            if let Err(e) = &outcome {
                worker_job.append_log(&format!("error: {}", e.message));
            }
            worker_job.finish(outcome);
            store.persist(&worker_job);
        });
        Ok(job)
    }
}
