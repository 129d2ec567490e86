#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde_json::Value;
use shiftkit_service::backend::BackendChoice;
use shiftkit_service::http::{router, AppState};
use shiftkit_service::pipeline::{self, no_progress, Context, LearnParams, ToyDatasetParams};
use shiftkit_service::workspace::Workspace;
use tempfile::TempDir;

pub const LEARN_STEPS: u64 = 300;

pub fn pinned_time() -> DateTime<Utc> {
    "2024-01-01T00:00:00Z".parse().unwrap()
}

/// A toy dataset on disk plus an empty scratch directory for workspaces.
pub struct Fixture {
    pub dir: TempDir,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        pipeline::make_toy_dataset(&ToyDatasetParams {
            out: dir.path().join("data"),
            classes: 8,
            train_per_class: 3,
            val_per_class: 20,
        })
        .unwrap();
        Fixture { dir }
    }

    pub fn train(&self) -> PathBuf {
        self.dir.path().join("data/train")
    }

    pub fn val(&self) -> PathBuf {
        self.dir.path().join("data/val")
    }

    pub fn workspace(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn context(&self, name: &str) -> Context {
        Context::new(Workspace::open(self.workspace(name)).unwrap(), BackendChoice::Toy).unwrap()
    }

    pub fn learn_params(&self) -> LearnParams {
        serde_json::from_value(serde_json::json!({
            "dataset_root": self.train(),
            "steps": LEARN_STEPS,
            "created_at": pinned_time(),
        }))
        .unwrap()
    }

    /// A workspace with tokens for all eight toy classes.
    pub fn learned(&self, name: &str) -> Context {
        let ctx = self.context(name);
        pipeline::learn_tokens(&ctx, &self.learn_params(), None, &no_progress).unwrap();
        ctx
    }
}

/// The HTTP API on an ephemeral port, stopped on drop.
pub struct Server {
    pub base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Server {
    pub fn start(ctx: Context) -> Self {
        Self::start_router(router(AppState::new(ctx)))
    }

    pub fn start_router(app: axum::Router) -> Self {
        let (addr_tx, addr_rx) = mpsc::channel();
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = stopped.await;
                    })
                    .await
                    .unwrap();
            });
        });
        let addr = addr_rx.recv_timeout(Duration::from_secs(10)).unwrap();
        Server {
            base: format!("http://{addr}"),
            stop: Some(stop),
            thread: Some(thread),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let resp = agent().get(&self.url(path)).call().unwrap();
        read(resp)
    }

    pub fn get_bytes(&self, path: &str) -> (u16, Vec<u8>) {
        let mut resp = agent().get(&self.url(path)).call().unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_to_vec().unwrap())
    }

    pub fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let resp = agent().post(&self.url(path)).send_json(body).unwrap();
        read(resp)
    }

    pub fn post_empty(&self, path: &str) -> (u16, Value) {
        read(agent().post(&self.url(path)).send_empty().unwrap())
    }

    /// Submits a job and polls it to completion, checking progress never goes backwards.
    pub fn run_job(&self, path: &str, body: &Value) -> Value {
        let (status, submitted) = self.post(path, body);
        assert_eq!(status, 202, "{path}: {submitted}");
        let id = submitted["job_id"].as_str().unwrap().to_string();
        self.wait(&id)
    }

    pub fn wait(&self, job_id: &str) -> Value {
        let start = Instant::now();
        let mut last = 0.0;
        loop {
            let (status, job) = self.get(&format!("/api/jobs/{job_id}"));
            assert_eq!(status, 200);
            let progress = job["progress"].as_f64().unwrap();
            assert!(progress >= last, "progress went from {last} to {progress}");
            last = progress;
            match job["status"].as_str().unwrap() {
                "done" | "failed" => return job,
                _ => {}
            }
            assert!(start.elapsed() < Duration::from_secs(120), "job {job_id} stuck: {job}");
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    /// Like [`Self::run_job`] but requires the job to succeed.
    pub fn run_ok(&self, path: &str, body: &Value) -> Value {
        let job = self.run_job(path, body);
        assert_eq!(job["status"], "done", "{path}: {job}");
        job
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn read(mut resp: ureq::http::Response<ureq::Body>) -> (u16, Value) {
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap();
    let value = if text.is_empty() {
        Value::Null
    } else {
        serde_json::from_str(&text).unwrap()
    };
    (status, value)
}

/// Every regular file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Asserts two trees hold the same files with the same bytes, naming the first difference.
pub fn assert_same_tree(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) {
    let names_a: Vec<_> = a.keys().collect();
    let names_b: Vec<_> = b.keys().collect();
    assert_eq!(names_a, names_b, "file sets differ");
    for (name, bytes) in a {
        assert!(bytes == &b[name], "{name} differs");
    }
}
