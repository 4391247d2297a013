//! The built-in line-script suite format.
//!
//! ```text
//! # comment
//! test sorts_duplicates
//!   run sort.sh            # /bin/sh <solution>/sort.sh, cwd scratch
//!   stdin 3 1 3
//!   expect 1 3 3
//!   expect_exit 0          # default 0
//! end
//! ```
//!
//! `sh <command>` may replace `run`; it executes through `/bin/sh -c` with
//! the solution directory hidden. Suite files ending in `.lst` are scripts;
//! any other suite files are fixtures readable from the tests directory.

use std::path::Path;

use peertest_core::model::normalize_rel_path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    /// Entry script relative to the solution directory, plus arguments.
    Run {
        entry: String,
        args: Vec<String>,
    },
    Sh(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestCase {
    pub name: String,
    pub step: Step,
    pub stdin: Vec<String>,
    pub expect: Vec<String>,
    pub expect_exit: i32,
}

impl TestCase {
    pub fn stdin_bytes(&self) -> Vec<u8> {
        self.stdin
            .iter()
            .flat_map(|l| l.bytes().chain(std::iter::once(b'\n')))
            .collect()
    }

    /// Compares captured stdout against the `expect` lines; trailing
    /// whitespace on each line is ignored.
    pub fn output_matches(&self, stdout: &str) -> bool {
        let got: Vec<&str> = stdout.lines().map(str::trim_end).collect();
        let want: Vec<&str> = self.expect.iter().map(|s| s.trim_end()).collect();
        got == want
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{file}:{line}: {message}")]
pub struct ScriptError {
    pub file: String,
    pub line: usize,
    pub message: String,
}

pub fn is_script(path: &str) -> bool {
    Path::new(path).extension().is_some_and(|e| e == "lst")
}

pub fn parse(file: &str, text: &str) -> Result<Vec<TestCase>, ScriptError> {
    let err = |line: usize, message: String| ScriptError {
        file: file.to_owned(),
        line,
        message,
    };
    let mut tests: Vec<TestCase> = Vec::new();
    let mut open: Option<OpenTest> = None;

    for (idx, raw) in text.lines().enumerate() {
        let n = idx + 1;
        let line = raw.trim_start();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (word, rest) = match line.split_once(char::is_whitespace) {
            Some((w, r)) => (w, r.trim_start()),
            None => (line.trim_end(), ""),
        };
        match (word, open.as_mut()) {
            ("test", None) => {
                let name = rest.trim();
                if name.is_empty() {
                    return Err(err(n, "test needs a name".into()));
                }
                if tests.iter().any(|t| t.name == name) {
                    return Err(err(n, format!("duplicate test name `{name}`")));
                }
                open = Some(OpenTest {
                    start: n,
                    name: name.to_owned(),
                    step: None,
                    stdin: Vec::new(),
                    expect: Vec::new(),
                    exit: None,
                });
            }
            ("test", Some(_)) => return Err(err(n, "`test` inside an unterminated test".into())),
            ("end", Some(_)) => {
                let t = open.take().expect("open test");
                let step = t.step.ok_or_else(|| {
                    err(t.start, format!("test `{}` has no run or sh step", t.name))
                })?;
                tests.push(TestCase {
                    name: t.name,
                    step,
                    stdin: t.stdin,
                    expect: t.expect,
                    expect_exit: t.exit.unwrap_or(0),
                });
            }
            ("run" | "sh", Some(t)) if t.step.is_some() => {
                return Err(err(n, format!("test `{}` already has a step", t.name)));
            }
            ("run", Some(t)) => {
                let words = shlex::split(rest).ok_or_else(|| err(n, "unbalanced quotes".into()))?;
                let Some((entry, args)) = words.split_first() else {
                    return Err(err(n, "run needs an entry file".into()));
                };
                let entry = normalize_rel_path(entry)
                    .map_err(|_| err(n, format!("invalid entry path `{entry}`")))?;
                t.step = Some(Step::Run {
                    entry,
                    args: args.to_vec(),
                });
            }
            ("sh", Some(t)) => {
                if rest.trim().is_empty() {
                    return Err(err(n, "sh needs a command".into()));
                }
                t.step = Some(Step::Sh(rest.trim_end().to_owned()));
            }
            ("stdin", Some(t)) => t.stdin.push(rest.to_owned()),
            ("expect", Some(t)) => t.expect.push(rest.to_owned()),
            ("expect_exit", Some(t)) => {
                let code = rest
                    .trim()
                    .parse()
                    .map_err(|_| err(n, format!("expect_exit needs an integer, got `{rest}`")))?;
                t.exit = Some(code);
            }
            (w, None) => return Err(err(n, format!("`{w}` outside a test block"))),
            (w, Some(_)) => return Err(err(n, format!("unknown directive `{w}`"))),
        }
    }
    if let Some(t) = open {
        return Err(err(t.start, format!("test `{}` is missing `end`", t.name)));
    }
    Ok(tests)
}

/// A test block whose `end` has not been seen yet.
struct OpenTest {
    start: usize,
    name: String,
    step: Option<Step>,
    stdin: Vec<String>,
    expect: Vec<String>,
    exit: Option<i32>,
}

/// Parses every script among the suite files, in path order.
pub fn parse_suite(files: &[(String, Vec<u8>)]) -> Result<Vec<TestCase>, ScriptError> {
    let mut scripts: Vec<&(String, Vec<u8>)> = files.iter().filter(|(p, _)| is_script(p)).collect();
    if scripts.is_empty() {
        return Err(ScriptError {
            file: "suite".into(),
            line: 0,
            message: "no .lst script among the suite files".into(),
        });
    }
    scripts.sort_by(|a, b| a.0.cmp(&b.0));
    let mut all: Vec<TestCase> = Vec::new();
    for (path, bytes) in scripts {
        let text = std::str::from_utf8(bytes).map_err(|_| ScriptError {
            file: path.clone(),
            line: 0,
            message: "not UTF-8".into(),
        })?;
        for t in parse(path, text)? {
            if all.iter().any(|o| o.name == t.name) {
                return Err(ScriptError {
                    file: path.clone(),
                    line: 0,
                    message: format!("duplicate test name `{}`", t.name),
                });
            }
            all.push(t);
        }
    }
    Ok(all)
}
