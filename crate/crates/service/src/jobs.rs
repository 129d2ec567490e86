//! Background jobs with polling.
//!
//! Mutating jobs run on the blocking pool one at a time: each holds the
//! workspace write lock for its whole run, so later submissions stay
//! `queued` until it finishes.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Learn,
    Generate,
    Score,
    CalibrateClass,
    Filter,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    /// Workspace-relative location of the job's output; set iff done.
    pub result_ref: Option<String>,
    pub result: Option<Value>,
    pub error: Option<String>,
}

/// What a finished job hands back: its output summary and where it landed.
pub struct JobOutput {
    pub result: Value,
    pub result_ref: String,
}

#[derive(Default)]
pub struct JobManager {
    jobs: Mutex<BTreeMap<String, Job>>,
    counter: AtomicU64,
    write_lock: Arc<Mutex<()>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // a panicking job must not take the whole service down with it
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl JobManager {
    pub fn new() -> Arc<Self> {
        Arc::new(JobManager::default())
    }

    /// Lock serializing every workspace mutation, jobs and calibration verdicts alike.
    pub fn write_lock(&self) -> MutexGuard<'_, ()> {
        lock(&self.write_lock)
    }

    pub fn get(&self, job_id: &str) -> Result<Job> {
        lock(&self.jobs)
            .get(job_id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found("job", job_id))
    }

    fn update(&self, job_id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(job) = lock(&self.jobs).get_mut(job_id) {
            f(job);
        }
    }

    /// Queues `work` on the blocking pool; requires a running Tokio runtime.
    pub fn submit<F>(self: &Arc<Self>, kind: JobKind, work: F) -> String
    where
        F: FnOnce(&dyn Fn(f64)) -> Result<JobOutput> + Send + 'static,
    {
        let n = self.counter.fetch_add(1, Ordering::SeqCst) + 1;
        let job_id = format!("job-{n:06}");
        lock(&self.jobs).insert(
            job_id.clone(),
            Job {
                job_id: job_id.clone(),
                kind,
                status: JobStatus::Queued,
                progress: 0.0,
                result_ref: None,
                result: None,
                error: None,
            },
        );
        let manager = Arc::clone(self);
        let id = job_id.clone();
        tokio::task::spawn_blocking(move || {
            let _guard = lock(&manager.write_lock);
            manager.update(&id, |j| j.status = JobStatus::Running);
            let progress = |p: f64| {
                manager.update(&id, |j| {
                    if p.is_finite() {
                        j.progress = j.progress.max(p.clamp(0.0, 1.0));
                    }
                })
            };
            let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| work(&progress)));
            manager.update(&id, |j| match outcome {
                Ok(Ok(out)) => {
                    j.status = JobStatus::Done;
                    j.progress = 1.0;
                    j.result = Some(out.result);
                    j.result_ref = Some(out.result_ref);
                }
                Ok(Err(e)) => {
                    j.status = JobStatus::Failed;
                    j.error = Some(e.to_string());
                }
                Err(_) => {
                    j.status = JobStatus::Failed;
                    j.error = Some("job panicked".into());
                }
            });
        });
        job_id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    async fn wait(m: &JobManager, id: &str) -> Job {
        for _ in 0..200 {
            let j = m.get(id).unwrap();
            if matches!(j.status, JobStatus::Done | JobStatus::Failed) {
                return j;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("job {id} did not finish");
    }

    #[tokio::test]
    async fn jobs_finish_and_report_results() {
        let m = JobManager::new();
        let ok = m.submit(JobKind::Generate, |p| {
            p(0.5);
            Ok(JobOutput {
                result: Value::from(5),
                result_ref: "samples".into(),
            })
        });
        let bad = m.submit(JobKind::Score, |_| Err(ServiceError::Conflict("nope".into())));
        let done = wait(&m, &ok).await;
        assert_eq!((done.status, done.progress), (JobStatus::Done, 1.0));
        assert_eq!(done.result_ref.as_deref(), Some("samples"));
        let failed = wait(&m, &bad).await;
        assert_eq!(failed.status, JobStatus::Failed);
        assert!(failed.result_ref.is_none());
        assert_eq!(failed.error.as_deref(), Some("nope"));
        assert!(m.get("job-999999").is_err());
    }

    #[tokio::test]
    async fn mutating_jobs_run_one_at_a_time() {
        let m = JobManager::new();
        let active = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let peak = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let ids: Vec<String> = (0..4)
            .map(|_| {
                let (active, peak) = (active.clone(), peak.clone());
                m.submit(JobKind::Filter, move |_| {
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(20));
                    active.fetch_sub(1, Ordering::SeqCst);
                    Ok(JobOutput {
                        result: Value::Null,
                        result_ref: String::new(),
                    })
                })
            })
            .collect();
        for id in &ids {
            wait(&m, id).await;
        }
        assert_eq!(peak.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn panicking_job_is_marked_failed() {
        let m = JobManager::new();
        let id = m.submit(JobKind::Learn, |_| panic!("boom"));
        let j = wait(&m, &id).await;
        assert_eq!(j.status, JobStatus::Failed);
        // the lock is usable afterwards
        drop(m.write_lock());
    }
}
