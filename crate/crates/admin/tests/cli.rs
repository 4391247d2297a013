use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use peertest_admin::{run, AdminError, Cli};
use peertest_core::Role;
use peertest_server::{Server, ServerConfig};

const PASSWORD: &str = "teacher-password";

struct Env {
    server: Option<Server>,
    url: String,
    dir: tempfile::TempDir,
}

impl Env {
    fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ServerConfig::new(dir.path().join("store"));
        cfg.bind = "127.0.0.1:0".parse().unwrap();
        cfg.worker_count = 1;
        let server = Server::start(cfg).unwrap();
        server
            .platform()
            .create_user("teacher", "Tessa Teacher", Role::Teacher, None, PASSWORD)
            .unwrap();
        let url = format!("http://{}", server.addr());
        let env = Self {
            server: Some(server),
            url,
            dir,
        };
        env.ok(&["login", "--username", "teacher", "--password", PASSWORD]);
        env
    }

    fn token_file(&self) -> PathBuf {
        self.dir.path().join("token")
    }

    fn cli(&self, args: &[&str]) -> Result<(String, String), AdminError> {
        let token = self.token_file();
        let mut argv = vec![
            "peertest-admin",
            "--server",
            &self.url,
            "--token-file",
            token.to_str().unwrap(),
        ];
        argv.extend_from_slice(args);
        let cli = Cli::try_parse_from(argv).unwrap();
        let (mut out, mut err) = (Vec::new(), Vec::new());
        run(cli, &mut out, &mut err)?;
        Ok((
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        ))
    }

    fn ok(&self, args: &[&str]) -> String {
        match self.cli(args) {
            Ok((out, _)) => out,
            Err(e) => panic!("{args:?} failed: {e}"),
        }
    }

    fn api(&self, path: &str) -> serde_json::Value {
        let token = fs::read_to_string(self.token_file()).unwrap();
        reqwest::blocking::Client::new()
            .get(format!("{}/api/v1{path}", self.url))
            .bearer_auth(token)
            .send()
            .unwrap()
            .json()
            .unwrap()
    }
}

impl Drop for Env {
    fn drop(&mut self) {
        if let Some(s) = self.server.take() {
            s.shutdown().unwrap();
        }
    }
}

fn quicksort_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("manifests/quicksort")
}

fn manifest() -> String {
    quicksort_dir()
        .join("manifest.toml")
        .to_string_lossy()
        .into_owned()
}

#[test]
fn login_failures_are_auth_errors() {
    let env = Env::start();
    let err = env
        .cli(&["login", "--username", "teacher", "--password", "wrong"])
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let cli = Cli::try_parse_from([
        "peertest-admin",
        "--token-file",
        "/nonexistent/token",
        "stage",
        "show",
        "--coursework",
        "x",
    ])
    .unwrap();
    let err = run(cli, &mut Vec::new(), &mut Vec::new()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("login"));
    let cli = Cli::try_parse_from([
        "peertest-admin",
        "--server",
        "http://127.0.0.1:1",
        "--token-file",
        env.token_file().to_str().unwrap(),
        "stage",
        "show",
        "--coursework",
        "x",
    ])
    .unwrap();
    assert!(matches!(
        run(cli, &mut Vec::new(), &mut Vec::new()),
        Err(AdminError::Transport(_))
    ));
}

#[test]
fn setup_is_idempotent() {
    let env = Env::start();
    let out = env.ok(&["setup", &manifest()]);
    assert!(out.starts_with("created coursework "), "{out}");
    assert!(
        out.contains("oracle_solution, signature_test, teacher_test"),
        "{out}"
    );
    let id = out.split_whitespace().nth(2).unwrap().to_owned();

    let cw = env.api(&format!("/courseworks/{id}"));
    assert_eq!(
        (cw["stage"].as_u64(), cw["runner_profile_id"].as_str()),
        (Some(0), Some("python-unittest"))
    );
    assert_eq!(cw["spec_document"]["path"], "spec.md");
    assert_eq!(cw["stage_deadlines"]["1"], "2026-11-06T17:00:00Z");
    let provided = env.api(&format!("/courseworks/{id}/submissions?provided"));
    let kinds: Vec<&str> = provided
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["kind"].as_str().unwrap())
        .collect();
    assert_eq!(kinds.iter().filter(|k| **k == "oracle_solution").count(), 1);
    assert_eq!(kinds.iter().filter(|k| **k == "signature_test").count(), 1);

    let again = env.ok(&["setup", &manifest()]);
    assert_eq!(
        again,
        format!("updated coursework {id} (no material changed)\n")
    );
    assert_eq!(
        env.api(&format!("/courseworks/{id}/submissions?provided")),
        provided
    );
    let log = env.api(&format!("/courseworks/{id}/log"));
    assert_eq!(
        log.as_array()
            .unwrap()
            .iter()
            .filter(|e| e["action"] == "submitted")
            .count(),
        3
    );
    assert_eq!(env.api("/courseworks").as_array().unwrap().len(), 1);
}

#[test]
fn setup_reports_every_missing_path() {
    let env = Env::start();
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(quicksort_dir().join("manifest.toml"))
        .unwrap()
        .replace("oracle = \"oracle\"\n", "")
        .replace("\"spec.md\"", "\"nowhere.md\"");
    let path = dir.path().join("manifest.toml");
    fs::write(&path, text).unwrap();
    let err = env.cli(&["setup", path.to_str().unwrap()]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let msg = err.to_string();
    assert!(
        msg.contains("`oracle`") && msg.contains("nowhere.md"),
        "{msg}"
    );
    assert_eq!(env.api("/courseworks").as_array().unwrap().len(), 0);
}

#[test]
fn roster_import_enrolls_each_username_once() {
    let env = Env::start();
    env.ok(&["setup", &manifest()]);
    let roster = quicksort_dir().join("roster.csv");
    let out = env.ok(&[
        "roster",
        "--coursework",
        "QuickSort",
        roster.to_str().unwrap(),
    ]);
    assert!(out.ends_with("11 students enrolled\n"), "{out}");
    assert_eq!(out.matches("new account, password ").count(), 11);

    let dir = tempfile::tempdir().unwrap();
    let dup = dir.path().join("dup.csv");
    fs::write(
        &dup,
        "s1001,Morag Kerr,Edinburgh\nn3001,New Student\ns1001,Morag Again,Edinburgh\n",
    )
    .unwrap();
    let (out, warnings) = env
        .cli(&["roster", "--coursework", "QuickSort", dup.to_str().unwrap()])
        .unwrap();
    assert!(
        out.contains("s1001\t") && out.contains("already enrolled"),
        "{out}"
    );
    assert!(out.ends_with("2 students enrolled\n"), "{out}");
    assert!(
        warnings.contains("line 3: duplicate username s1001"),
        "{warnings}"
    );

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "username,display_name\nok1,Fine\n  ,No Name\n").unwrap();
    match env.cli(&["roster", "--coursework", "QuickSort", bad.to_str().unwrap()]) {
        Err(AdminError::MalformedRow { line: 3, .. }) => {}
        other => panic!("expected malformed row on line 3, got {other:?}"),
    }

    let cw = env.api("/courseworks?title=QuickSort");
    let id = cw[0]["coursework_id"].as_str().unwrap();
    let groups = env.api(&format!("/courseworks/{id}/groups"));
    assert_eq!(groups["ungrouped"].as_array().unwrap().len(), 12);
}

#[test]
fn grouping_stages_and_exports() {
    let env = Env::start();
    env.ok(&["setup", &manifest()]);
    let roster = quicksort_dir().join("roster.csv");
    env.ok(&[
        "roster",
        "--coursework",
        "QuickSort",
        roster.to_str().unwrap(),
    ]);

    let formed = env.ok(&[
        "groups",
        "form",
        "--coursework",
        "QuickSort",
        "--seed",
        "2024",
    ]);
    let lines: Vec<&str> = formed.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        lines.iter().map(|l| l.split(", ").count()).sum::<usize>(),
        11,
        "{formed}"
    );
    assert_eq!(
        env.ok(&[
            "groups",
            "form",
            "--coursework",
            "QuickSort",
            "--seed",
            "2024"
        ]),
        formed
    );
    assert_eq!(
        env.ok(&["groups", "show", "--coursework", "QuickSort"]),
        formed
    );

    // Moving a student and importing the saved table restores the plan.
    let dir = tempfile::tempdir().unwrap();
    let saved = dir.path().join("groups.tsv");
    fs::write(&saved, &formed).unwrap();
    let student = lines[0].split(", ").next().unwrap();
    let amended = env.ok(&[
        "groups",
        "amend",
        "--coursework",
        "QuickSort",
        "--student",
        student,
        "--group",
        "g2",
    ]);
    assert_ne!(amended, formed);
    assert!(
        amended.lines().nth(1).unwrap().contains(student),
        "{amended}"
    );
    assert_eq!(
        env.ok(&[
            "groups",
            "import",
            "--coursework",
            "QuickSort",
            saved.to_str().unwrap()
        ]),
        formed
    );

    assert_eq!(
        env.ok(&["stage", "show", "--coursework", "QuickSort"]),
        "QuickSort: stage 0 (Coursework Setup)\n"
    );
    assert_eq!(
        env.ok(&["stage", "advance", "--coursework", "QuickSort"]),
        "QuickSort: stage 1 (Development & Self-Testing)\n"
    );

    let log = dir.path().join("log.tsv");
    env.ok(&[
        "export-log",
        "--coursework",
        "QuickSort",
        "--output",
        log.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&log).unwrap();
    assert!(text.lines().any(|l| l.contains("stage_advanced")), "{text}");
    let one = env.ok(&[
        "export-log",
        "--coursework",
        "QuickSort",
        "--student",
        "s1001",
    ]);
    assert!(one.lines().next().unwrap().contains("enrolled"), "{one}");
    assert!(one.lines().all(|l| !l.contains("stage_advanced")));
    assert_eq!(env.ok(&["export-threads", "--coursework", "QuickSort"]), "");

    let err = env
        .cli(&["stage", "advance", "--coursework", "No Such Coursework"])
        .unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}
