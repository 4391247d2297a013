//! Test execution harness: runs one test suite against one target inside
//! the sandbox and turns what happened into per-test verdicts.

pub mod linescript;
pub mod profile;
pub mod sandbox;
pub mod sanitize;
pub mod verdict;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use peertest_core::{ErrorCategory, Outcome, ResourceUsage, RunStatus, Verdict};

use crate::linescript::{Step, TestCase};
use crate::profile::{Dirs, Limits, RunnerProfile};
use crate::sandbox::{Exit, Invocation, LimitHit, ProcessReport, Sandbox, WorkDir};
use crate::sanitize::Sanitizer;
use crate::verdict::RunArtifacts;

pub const TRUNCATION_MARKER: &str = "[output truncated]";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("runner profile: {0}")]
    Profile(String),
    #[error("sandbox: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunFile {
    pub path: String,
    pub contents: Vec<u8>,
}

impl RunFile {
    pub fn new(path: impl Into<String>, contents: impl Into<Vec<u8>>) -> Self {
        Self {
            path: path.into(),
            contents: contents.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionReport {
    /// One of finished, errored or timed_out.
    pub status: RunStatus,
    pub error_category: Option<ErrorCategory>,
    pub error_message: Option<String>,
    pub verdicts: Vec<Verdict>,
    pub sanitized_output: String,
    pub command_log: Vec<String>,
    pub exit_code: Option<i32>,
    pub usage: ResourceUsage,
}

pub struct Harness {
    sandbox: Sandbox,
}

impl Harness {
    pub fn new(sandbox: Sandbox) -> Self {
        Self { sandbox }
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    /// Runs `suite` against `target` under `profile`.
    ///
    /// Errors are infrastructure failures only; anything the submitted code
    /// does is reflected in the report.
    pub fn execute(
        &self,
        profile: &RunnerProfile,
        suite: &[RunFile],
        target: &[RunFile],
    ) -> Result<ExecutionReport, HarnessError> {
        profile.validate()?;
        let wd = self.sandbox.create_workdir()?;
        let as_pairs = |files: &[RunFile]| -> Vec<(String, Vec<u8>)> {
            files
                .iter()
                .map(|f| (f.path.clone(), f.contents.clone()))
                .collect()
        };
        wd.populate(&wd.solution_dir(), &as_pairs(target))?;
        wd.populate(&wd.tests_dir(), &as_pairs(suite))?;

        let sanitizer = Sanitizer::for_run(wd.root(), &[self.sandbox.base_dir().to_path_buf()]);
        let mut run = RunState::new(&wd, profile.limits, sanitizer);
        if profile.is_line_script() {
            self.line_script(&mut run, &as_pairs(suite))?;
        } else {
            self.generic(&mut run, profile)?;
        }
        Ok(run.finish())
    }

    fn generic(&self, run: &mut RunState, profile: &RunnerProfile) -> Result<(), HarnessError> {
        let dirs = Dirs {
            solution_dir: run.wd.solution_dir(),
            tests_dir: run.wd.tests_dir(),
            work_dir: run.wd.root().to_path_buf(),
        };
        for step in &profile.compile_steps {
            let argv = profile::expand(step, &dirs)?;
            let p = self.step(
                run,
                Invocation {
                    merge_stderr: true,
                    ..Invocation::new(argv, run.wd.scratch_dir())
                },
            )?;
            run.append(&p.stdout, p.truncated);
            if run.limit_outcome(&p) {
                return Ok(());
            }
            match p.exit {
                Exit::Code(0) => {}
                Exit::Code(c) => {
                    run.error(
                        ErrorCategory::CompileError,
                        format!("compile step exited with {c}"),
                    );
                    return Ok(());
                }
                Exit::Signal(s) => {
                    run.error(
                        ErrorCategory::CompileError,
                        format!("compile step killed by signal {s}"),
                    );
                    return Ok(());
                }
                Exit::SpawnFailed(e) => {
                    run.error(ErrorCategory::CompileError, e);
                    return Ok(());
                }
            }
        }

        let argv = profile::expand(&profile.run_step, &dirs)?;
        let p = self.step(
            run,
            Invocation {
                merge_stderr: true,
                ..Invocation::new(argv, run.wd.scratch_dir())
            },
        )?;
        run.append(&p.stdout, p.truncated);
        run.exit_code = p.exit_code();
        if run.limit_outcome(&p) {
            return Ok(());
        }
        if let Exit::SpawnFailed(e) = p.exit {
            run.error(ErrorCategory::RunnerCrash, e);
            return Ok(());
        }
        let artifacts = RunArtifacts {
            exit_code: p.exit_code(),
            output: String::from_utf8_lossy(&p.stdout).into_owned(),
            reports: collect_reports(&run.wd.reports_dir()),
        };
        match verdict::parse_verdicts(profile.verdict_parser, &artifacts) {
            Ok(v) => run.verdicts = v,
            Err(e) => run.error(ErrorCategory::ParseFailure, e.0),
        }
        Ok(())
    }

    fn line_script(
        &self,
        run: &mut RunState,
        suite: &[(String, Vec<u8>)],
    ) -> Result<(), HarnessError> {
        let tests = match linescript::parse_suite(suite) {
            Ok(t) => t,
            Err(e) => {
                run.append(format!("# {e}\n").as_bytes(), false);
                run.error(ErrorCategory::CompileError, e.to_string());
                return Ok(());
            }
        };
        for test in &tests {
            if !self.line_script_case(run, test)? {
                break;
            }
        }
        Ok(())
    }

    /// Returns false once the run must stop.
    fn line_script_case(&self, run: &mut RunState, test: &TestCase) -> Result<bool, HarnessError> {
        let scratch = run.wd.scratch_dir();
        let mut inv = match &test.step {
            Step::Run { entry, args } => {
                let path = run.wd.solution_dir().join(entry);
                if !path.is_file() {
                    run.record(
                        test,
                        Outcome::Error,
                        &[format!("entry `{entry}` not found in the submission")],
                    );
                    return Ok(true);
                }
                let mut argv = vec!["/bin/sh".to_string(), path.to_string_lossy().into_owned()];
                argv.extend(args.iter().cloned());
                Invocation::new(argv, scratch)
            }
            Step::Sh(cmd) => {
                let mut inv =
                    Invocation::new(vec!["/bin/sh".into(), "-c".into(), cmd.clone()], scratch);
                inv.extra_hidden.push(run.wd.solution_dir());
                inv
            }
        };
        inv.stdin = test.stdin_bytes();
        let p = self.step(run, inv)?;
        if let Some(hit) = p.limit {
            run.record(
                test,
                Outcome::Error,
                &[format!("{} limit exceeded", limit_name(hit))],
            );
            run.limit_outcome(&p);
            return Ok(false);
        }
        let stdout = String::from_utf8_lossy(&p.stdout);
        let stderr = String::from_utf8_lossy(&p.stderr);
        let mut notes = Vec::new();
        let outcome = match &p.exit {
            Exit::SpawnFailed(e) => {
                notes.push(e.clone());
                Outcome::Error
            }
            Exit::Signal(s) => {
                notes.push(format!("killed by signal {s}"));
                Outcome::Error
            }
            Exit::Code(code) => {
                let mut ok = true;
                if *code != test.expect_exit {
                    notes.push(format!("exit status {code}, expected {}", test.expect_exit));
                    ok = false;
                }
                if !test.output_matches(&stdout) {
                    notes.push(format!("expected: {:?}", test.expect.join("\n")));
                    notes.push(format!("got:      {:?}", stdout.trim_end()));
                    ok = false;
                }
                if ok {
                    Outcome::Pass
                } else {
                    Outcome::Fail
                }
            }
        };
        if outcome != Outcome::Pass && !stderr.trim().is_empty() {
            notes.extend(stderr.lines().take(20).map(|l| format!("stderr: {l}")));
        }
        if p.truncated {
            notes.push(TRUNCATION_MARKER.into());
        }
        run.record(test, outcome, &notes);
        Ok(true)
    }

    fn step(&self, run: &mut RunState, inv: Invocation) -> Result<ProcessReport, HarnessError> {
        let line = shlex::try_join(inv.argv.iter().map(String::as_str))
            .unwrap_or_else(|_| inv.argv.join(" "));
        run.command_log
            .push(run.sanitizer.apply(&format!("$ {line}")));
        let p = self.sandbox.run(run.wd, &inv, &run.limits, run.deadline)?;
        run.usage.wall_millis += p.wall.as_millis() as u64;
        run.usage.cpu_millis += p.cpu.as_millis() as u64;
        run.usage.max_rss_bytes = run.usage.max_rss_bytes.max(p.max_rss_bytes);
        Ok(p)
    }
}

fn limit_name(hit: LimitHit) -> &'static str {
    match hit {
        LimitHit::Wall => "wall-clock",
        LimitHit::Cpu => "CPU time",
        LimitHit::Memory => "memory",
    }
}

fn collect_reports(dir: &Path) -> Vec<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        if let Ok(entries) = fs::read_dir(dir) {
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    walk(&p, out);
                } else if p.extension().is_some_and(|x| x == "xml") {
                    out.push(p);
                }
            }
        }
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths);
    paths.sort();
    paths
        .iter()
        .filter_map(|p| fs::read_to_string(p).ok())
        .collect()
}

struct RunState<'a> {
    wd: &'a WorkDir,
    limits: Limits,
    deadline: Instant,
    sanitizer: Sanitizer,
    output: Vec<u8>,
    truncated: bool,
    status: RunStatus,
    error_category: Option<ErrorCategory>,
    error_message: Option<String>,
    verdicts: Vec<Verdict>,
    command_log: Vec<String>,
    exit_code: Option<i32>,
    usage: ResourceUsage,
}

impl<'a> RunState<'a> {
    fn new(wd: &'a WorkDir, limits: Limits, sanitizer: Sanitizer) -> Self {
        Self {
            wd,
            limits,
            deadline: Instant::now() + Duration::from_secs(limits.wall_seconds),
            sanitizer,
            output: Vec::new(),
            truncated: false,
            status: RunStatus::Finished,
            error_category: None,
            error_message: None,
            verdicts: Vec::new(),
            command_log: Vec::new(),
            exit_code: None,
            usage: ResourceUsage::default(),
        }
    }

    fn append(&mut self, bytes: &[u8], truncated: bool) {
        let room = (self.limits.output_bytes as usize).saturating_sub(self.output.len());
        self.output
            .extend_from_slice(&bytes[..bytes.len().min(room)]);
        self.truncated |= truncated || bytes.len() > room;
    }

    fn record(&mut self, test: &TestCase, outcome: Outcome, notes: &[String]) {
        let head = match outcome {
            Outcome::Pass => "ok",
            Outcome::Fail => "not ok",
            Outcome::Error => "error",
        };
        let mut text = format!("{head} {}\n", test.name);
        for n in notes {
            text.push_str(&format!("# {n}\n"));
        }
        self.append(text.as_bytes(), false);
        self.verdicts.push(Verdict::new(test.name.clone(), outcome));
    }

    fn error(&mut self, category: ErrorCategory, message: String) {
        self.status = RunStatus::Errored;
        self.error_category = Some(category);
        self.error_message = Some(message);
    }

    /// Applies a resource-limit outcome; returns true if one was hit.
    fn limit_outcome(&mut self, p: &ProcessReport) -> bool {
        match p.limit {
            None => false,
            Some(LimitHit::Wall | LimitHit::Cpu) => {
                self.status = RunStatus::TimedOut;
                self.error_message =
                    Some(format!("{} limit exceeded", limit_name(p.limit.unwrap())));
                true
            }
            Some(LimitHit::Memory) => {
                self.error(ErrorCategory::RunnerCrash, "memory limit exceeded".into());
                true
            }
        }
    }

    fn finish(self) -> ExecutionReport {
        let mut text = String::from_utf8_lossy(&self.output).into_owned();
        if self.truncated {
            if !text.is_empty() && !text.ends_with('\n') {
                text.push('\n');
            }
            text.push_str(TRUNCATION_MARKER);
            text.push('\n');
        }
        ExecutionReport {
            status: self.status,
            error_category: self.error_category,
            error_message: self.error_message.map(|m| self.sanitizer.apply(&m)),
            // Partial results stay in the output; verdicts belong to finished runs.
            verdicts: if self.status == RunStatus::Finished {
                self.verdicts
            } else {
                Vec::new()
            },
            sanitized_output: self.sanitizer.apply(&text),
            command_log: self.command_log,
            exit_code: self.exit_code,
            usage: self.usage,
        }
    }
}
