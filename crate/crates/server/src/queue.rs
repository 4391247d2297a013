//! Execution workers. Runs are handed over by id through a channel; the
//! database is the source of truth, so a lost or repeated message costs
//! nothing: claiming is a compare-and-set on the run's status.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use peertest_core::{ErrorCategory, ResourceUsage, RunId, RunStatus};
use peertest_harness::sandbox::Sandbox;
use peertest_harness::{ExecutionReport, Harness};

use crate::platform::{Platform, RunJob};

pub struct Workers {
    handles: Vec<JoinHandle<()>>,
    stopping: Arc<AtomicBool>,
}

impl Workers {
    /// Re-queues interrupted runs and starts `worker_count` workers.
    pub fn start(platform: Arc<Platform>) -> anyhow::Result<Self> {
        let config = platform.config().sandbox_config();
        // Fail at startup, not on the first run, when the sandbox is unusable.
        let mut sandboxes = Vec::new();
        for _ in 0..platform.config().worker_count {
            sandboxes.push(Sandbox::new(config.clone()).map_err(|e| {
                anyhow::anyhow!(
                    "cannot prepare sandbox base {}: {e}",
                    config.base_dir.display()
                )
            })?);
        }
        let (tx, rx) = channel();
        for id in platform
            .recover_queue()
            .map_err(|e| anyhow::anyhow!(e.body.message))?
        {
            tx.send(id).expect("receiver is alive");
        }
        platform.attach_queue(tx);
        let rx = Arc::new(Mutex::new(rx));
        let stopping = Arc::new(AtomicBool::new(false));
        let handles = sandboxes
            .into_iter()
            .enumerate()
            .map(|(i, sandbox)| {
                let platform = platform.clone();
                let rx = rx.clone();
                let stopping = stopping.clone();
                std::thread::Builder::new()
                    .name(format!("run-worker-{i}"))
                    .spawn(move || worker(platform, Harness::new(sandbox), rx, stopping))
                    .expect("spawning a worker thread")
            })
            .collect();
        Ok(Self { handles, stopping })
    }

    /// Lets in-flight runs finish and stops taking new ones; queued runs
    /// stay queued on disk for the next start.
    pub fn shutdown(self, platform: &Platform) {
        self.stopping.store(true, Ordering::SeqCst);
        platform.detach_queue();
        for h in self.handles {
            let _ = h.join();
        }
    }
}

fn worker(
    platform: Arc<Platform>,
    harness: Harness,
    rx: Arc<Mutex<Receiver<RunId>>>,
    stopping: Arc<AtomicBool>,
) {
    loop {
        let next = rx.lock().unwrap_or_else(|p| p.into_inner()).recv();
        let Ok(id) = next else { return };
        if stopping.load(Ordering::SeqCst) {
            return;
        }
        match platform.claim_run(&id) {
            Ok(Some(job)) => {
                let report = execute(&harness, &job);
                if let Err(e) = platform.complete_run(&id, &report) {
                    tracing::error!(run = %id, "storing run result failed: {}", e.body.message);
                }
            }
            Ok(None) => {}
            Err(e) => tracing::error!(run = %id, "claiming run failed: {}", e.body.message),
        }
    }
}

fn execute(harness: &Harness, job: &RunJob) -> ExecutionReport {
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        harness.execute(&job.profile, &job.suite, &job.target)
    }));
    let message = match outcome {
        Ok(Ok(report)) => return report,
        Ok(Err(e)) => format!("the test runner could not be started: {e}"),
        Err(_) => "the test runner failed unexpectedly".to_owned(),
    };
    tracing::error!(run = %job.run_id, "{message}");
    ExecutionReport {
        status: RunStatus::Errored,
        error_category: Some(ErrorCategory::RunnerCrash),
        // Infrastructure details stay in the server log.
        error_message: Some(message.split(':').next().unwrap_or_default().to_owned()),
        verdicts: Vec::new(),
        sanitized_output: String::new(),
        command_log: Vec::new(),
        exit_code: None,
        usage: ResourceUsage::default(),
    }
}
