//! Acceptance suite. Prints one PASS or FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use base64::Engine;
use common::*;
use peertest_core::grouping::{form_groups, peer_targets, Candidate};
use peertest_core::permissions::{permitted, AccessContext, Actor, Capability, Decision};
use peertest_core::{Outcome, Role, RunStatus, Stage, SubmissionId, SubmissionKind, UserId};
use peertest_harness::profile::{Limits, RunnerProfile};
use peertest_harness::sandbox::{Sandbox, SandboxConfig};
use peertest_harness::sanitize::{Sanitizer, RUN_TOKEN};
use peertest_harness::{ExecutionReport, Harness, RunFile};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use reqwest::StatusCode;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn main() -> ExitCode {
    let criteria: &[Criterion] = &[
        ("table 1 matrix conformance", table1_matrix),
        ("end-to-end QuickSort scenario", quicksort_scenario),
        ("oracle hiding", oracle_hiding),
        ("sandbox safety", sandbox_safety),
        ("sanitization determinism", sanitization),
        ("grouping properties", grouping_properties),
        ("feedback history", feedback_history),
        ("crash recovery", crash_recovery),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name} ({detail}; {secs:.1}s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} ({secs:.1}s)");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// Table 1

/// Student columns of the stage table: solutions upload, tests upload,
/// self-testing, peer-testing.
const TABLE_1: [[bool; 4]; 4] = [
    [false, false, false, false],
    [true, true, true, false],
    [false, true, true, true],
    [false, false, false, false],
];

fn student(id: &str) -> Actor {
    Actor {
        user_id: UserId::from(id),
        role: Role::Student,
        enrolled: true,
    }
}

fn allowed(cap: Capability, ctx: &AccessContext) -> bool {
    matches!(permitted(cap, ctx), Decision::Allow)
}

fn table1_matrix() -> Check {
    let started = Instant::now();
    let me = student("me");
    let mut cells = 0;
    for (n, row) in TABLE_1.iter().enumerate() {
        let stage = Stage::from_number(n as u8).unwrap();
        let base = AccessContext::new(me.clone(), stage);
        let got = [
            allowed(
                Capability::UploadSolution,
                &base.clone().with_kind(SubmissionKind::Solution),
            ),
            allowed(
                Capability::UploadTest,
                &base.clone().with_kind(SubmissionKind::TestSuite),
            ),
            allowed(
                Capability::RunSelfTest,
                &base
                    .clone()
                    .with_target(me.user_id.clone(), SubmissionKind::Solution, false),
            ),
            allowed(
                Capability::RunPeerTest,
                &base
                    .clone()
                    .with_target(UserId::from("peer"), SubmissionKind::Solution, true),
            ),
        ];
        ensure!(
            got == *row,
            "stage {n}: permitted gives {got:?}, table says {row:?}"
        );
        cells += 4;
        let oracle = allowed(
            Capability::RunOracleTest,
            &base.clone().with_target(
                UserId::from("teacher"),
                SubmissionKind::OracleSolution,
                false,
            ),
        );
        ensure!(
            oracle == (n == 1 || n == 2),
            "stage {n}: oracle runs allowed = {oracle}"
        );
        let report = allowed(
            Capability::SubmitReport,
            &base.clone().with_kind(SubmissionKind::ReflectiveReport),
        );
        ensure!(report == (n == 3), "stage {n}: report allowed = {report}");
    }
    let pure = started.elapsed();
    ensure!(pure < Duration::from_secs(1), "matrix took {pure:?}");

    // The same grid, exercised through the service.
    let ts = TestServer::start();
    let teacher = ts.teacher();
    let f = fixture(&ts, &teacher, 2);
    let cw = &f.cw;
    let ids: Vec<&str> = f.students.iter().map(|(id, _)| id.as_str()).collect();
    teacher.put(
        &format!("/api/v1/courseworks/{cw}/groups"),
        json!({"mode": "set", "groups": [ids]}),
    );
    let (a, b) = (&f.students[0].1, &f.students[1].1);
    let mut own_solution: Option<String> = None;
    let mut peer_solution: Option<String> = None;
    let mut api_cells = 0;
    for (n, row) in TABLE_1.iter().enumerate() {
        if n > 0 {
            advance(&teacher, cw);
        }
        if n == 1 {
            peer_solution = Some(b.upload_ok(cw, "solution", &[("sort.sh", SORTER)]));
        }
        let solution_text = format!("# stage {n}\n{SORTER}");
        let (status, body) = a.upload(cw, "solution", &[("sort.sh", &solution_text)]);
        ensure!(
            status.is_success() == row[0],
            "stage {n} upload solution via API: {status} {body}"
        );
        if status.is_success() {
            own_solution = body["submission_id"].as_str().map(str::to_owned);
        }
        let suite_text = format!("# stage {n}\n{DUPLICATES_TEST}");
        let (status, body) = a.upload(cw, "test_suite", &[("dups.lst", &suite_text)]);
        ensure!(
            status.is_success() == row[1],
            "stage {n} upload test via API: {status} {body}"
        );
        let suite = body["submission_id"]
            .as_str()
            .map(str::to_owned)
            .unwrap_or_else(|| f.signature.clone());
        api_cells += 2;
        if let (Some(own), Some(peer)) = (&own_solution, &peer_solution) {
            let (status, body) = a.run(&suite, own);
            ensure!(
                status.is_success() == row[2],
                "stage {n} self-test via API: {status} {body}"
            );
            let (status, body) = a.run(&suite, peer);
            ensure!(
                status.is_success() == row[3],
                "stage {n} peer-test via API: {status} {body}"
            );
            api_cells += 2;
        }
    }
    ts.stop();
    Ok(format!(
        "{cells} cells plus oracle and report rows via permitted() in {:.1}ms; {api_cells} cells via the API",
        pure.as_secs_f64() * 1000.0
    ))
}

// ---------------------------------------------------------------------------
// End-to-end scenario

fn line_script_profile() -> String {
    fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("config/profiles/line-script.toml"),
    )
    .unwrap()
}

fn write_manifest(dir: &Path) -> PathBuf {
    for d in ["oracle", "signature", "teacher-tests"] {
        fs::create_dir_all(dir.join(d)).unwrap();
    }
    fs::write(
        dir.join("spec.md"),
        "# QuickSort\nRead one line of integers, print them sorted.\n",
    )
    .unwrap();
    fs::write(dir.join("profile.toml"), line_script_profile()).unwrap();
    fs::write(dir.join("oracle/sort.sh"), SORTER).unwrap();
    fs::write(dir.join("signature/signature.lst"), SIGNATURE_TEST).unwrap();
    fs::write(dir.join("teacher-tests/duplicates.lst"), DUPLICATES_TEST).unwrap();
    let manifest = dir.join("manifest.toml");
    fs::write(
        &manifest,
        "title = \"QuickSort\"\nspec = \"spec.md\"\nrunner_profile = \"profile.toml\"\n\
         oracle = \"oracle\"\nsignature_tests = \"signature\"\nteacher_tests = \"teacher-tests\"\n",
    )
    .unwrap();
    manifest
}

fn enroll(ts: &TestServer, teacher: &Api, cw: &str, username: &str, name: &str) -> (String, Api) {
    let (status, body) = teacher.post(
        &format!("/api/v1/courseworks/{cw}/enroll"),
        json!({"username": username, "display_name": name, "password": "student-password"}),
    );
    assert_eq!(status, StatusCode::CREATED, "{body}");
    (
        body["user_id"].as_str().unwrap().to_owned(),
        ts.login(username, "student-password"),
    )
}

fn provided(teacher: &Api, cw: &str, kind: &str) -> String {
    let (_, subs) = teacher.get(&format!("/api/v1/courseworks/{cw}/submissions?provided"));
    subs.as_array()
        .unwrap()
        .iter()
        .find(|s| s["kind"] == kind && s["latest"] == true)
        .unwrap_or_else(|| panic!("no {kind}"))["submission_id"]
        .as_str()
        .unwrap()
        .to_owned()
}

fn outcomes(run: &Value) -> Vec<String> {
    run["verdicts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["outcome"].as_str().unwrap().to_owned())
        .collect()
}

fn quicksort_scenario() -> Check {
    let started = Instant::now();
    let ts = TestServer::start();
    let teacher = ts.teacher();
    let dir = tempfile::tempdir().unwrap();
    let manifest = peertest_admin::manifest::CourseworkManifest::load(&write_manifest(dir.path()))
        .map_err(|e| e.to_string())?;
    let admin = peertest_admin::client::Client::new(&ts.base, teacher.token.clone()).unwrap();
    let applied = peertest_admin::manifest::apply(&admin, &manifest).map_err(|e| e.to_string())?;
    let cw = applied.coursework_id.clone();
    let again = peertest_admin::manifest::apply(&admin, &manifest).map_err(|e| e.to_string())?;
    ensure!(
        again.coursework_id == cw && again.uploaded.is_empty(),
        "re-apply was not idempotent: {again:?}"
    );
    let (_, provided_list) = teacher.get(&format!("/api/v1/courseworks/{cw}/submissions?provided"));
    let kinds: Vec<&str> = provided_list
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["kind"].as_str().unwrap())
        .collect();
    ensure!(
        kinds.iter().filter(|k| **k == "oracle_solution").count() == 1
            && kinds.iter().filter(|k| **k == "signature_test").count() == 1,
        "provided material after apply: {kinds:?}"
    );
    let signature = provided(&teacher, &cw, "signature_test");
    let teacher_test = provided(&teacher, &cw, "teacher_test");

    let (a_id, a) = enroll(&ts, &teacher, &cw, "ana", "Ana Alvarez");
    let (b_id, b) = enroll(&ts, &teacher, &cw, "ben", "Ben Brown");
    let (_, _c) = enroll(&ts, &teacher, &cw, "cat", "Cat Chen");
    let (status, plan) = teacher.put(
        &format!("/api/v1/courseworks/{cw}/groups"),
        json!({"mode": "form", "seed": 4, "group_size": 3}),
    );
    ensure!(
        status == StatusCode::OK && plan["groups"].as_array().unwrap().len() == 1,
        "grouping: {plan}"
    );
    advance(&teacher, &cw);

    let a_sol = a.upload_ok(&cw, "solution", &[("sort.sh", SORTER)]);
    let a_sig = a.run_to_end(&signature, &a_sol);
    let sig_outcomes = outcomes(&a_sig);
    ensure!(
        !sig_outcomes.is_empty() && sig_outcomes.iter().all(|o| o == "pass"),
        "A signature run: {a_sig}"
    );

    let b_sol = b.upload_ok(&cw, "solution", &[("sort.sh", DEDUP_SORTER)]);
    let b_dup = b.run_to_end(&teacher_test, &b_sol);
    let b_again = teacher.run_to_end(&teacher_test, &b_sol);
    ensure!(outcomes(&b_dup) == ["fail"], "B teacher test: {b_dup}");
    ensure!(
        outcomes(&b_again) == outcomes(&b_dup),
        "teacher test not deterministic"
    );
    ensure!(
        b_again["sanitized_output"] == b_dup["sanitized_output"],
        "output differs between identical runs"
    );

    advance(&teacher, &cw);
    let a_suite = a.upload_ok(
        &cw,
        "test_suite",
        &[("keeps_duplicates.lst", DUPLICATES_TEST)],
    );
    let peer = a.run_to_end(&a_suite, &b_sol);
    ensure!(outcomes(&peer) == ["fail"], "A against B: {peer}");
    let run_id = peer["run_id"].as_str().unwrap();
    let (s1, c1) = a.post(
        &format!("/api/v1/runs/{run_id}/comments"),
        json!({"body": "Your sort drops duplicates."}),
    );
    let (s2, _) = b.post(
        &format!("/api/v1/runs/{run_id}/comments"),
        json!({"body": "Thanks, sort -u was the culprit."}),
    );
    ensure!(
        s1 == StatusCode::CREATED && s2 == StatusCode::CREATED,
        "comments: {s1} {s2}"
    );
    let comment = c1["comment_id"].as_str().unwrap();
    let (s3, edited) = a.patch(
        &format!("/api/v1/comments/{comment}"),
        json!({"body": "Your sort drops duplicate values."}),
    );
    ensure!(
        s3 == StatusCode::OK && edited["revision_count"] == 2,
        "edit: {edited}"
    );
    let (_, seen) = teacher.get(&format!("/api/v1/runs/{run_id}"));
    let revs = seen["discussion"]["comments"][0]["revisions"]
        .as_array()
        .map_or(0, Vec::len);
    ensure!(revs == 2, "teacher sees {revs} revisions");
    advance(&teacher, &cw);

    let (_, log) = teacher.get(&format!("/api/v1/courseworks/{cw}/log/{a_id}"));
    let log = log.as_array().unwrap();
    let actions: Vec<&str> = log.iter().map(|e| e["action"].as_str().unwrap()).collect();
    let expected = [
        "enrolled",
        "group_amended",
        "submitted",
        "run_requested",
        "run_finished",
        "submitted",
        "run_requested",
        "run_finished",
        "comment_posted",
        "comment_edited",
    ];
    ensure!(actions == expected, "learner log for A: {actions:?}");
    let stamps: Vec<&str> = log
        .iter()
        .map(|e| e["timestamp"].as_str().unwrap())
        .collect();
    ensure!(
        stamps.windows(2).all(|w| w[0] <= w[1]),
        "log out of order: {stamps:?}"
    );
    ensure!(
        log.iter().all(|e| e["actor_id"] == a_id.as_str()
            || e["action"] == "enrolled"
            || e["action"] == "group_amended"),
        "foreign actions in A's log"
    );
    ensure!(
        !log.iter().any(|e| e["actor_id"] == b_id.as_str()),
        "B's actions leaked into A's log"
    );
    ts.stop();
    let took = started.elapsed();
    ensure!(took < Duration::from_secs(30), "scenario took {took:?}");
    Ok(format!(
        "{} log entries in order, {took:.1?}",
        actions.len()
    ))
}

// ---------------------------------------------------------------------------
// Oracle hiding

fn oracle_hiding() -> Check {
    let ts = TestServer::start();
    let teacher = ts.teacher();
    let marker = format!("ORACLE-SOURCE-{}", uuid_like());
    let oracle_text = format!("# {marker}\n{SORTER}");
    let (_, cw) = teacher.post("/api/v1/courseworks", json!({"title": "Hidden oracle"}));
    let cw = cw["coursework_id"].as_str().unwrap().to_owned();
    let oracle = teacher.upload_ok(&cw, "oracle_solution", &[("sort.sh", &oracle_text)]);
    let signature = teacher.upload_ok(&cw, "signature_test", &[("signature.lst", SIGNATURE_TEST)]);
    let students: Vec<Api> = (0..2)
        .map(|i| {
            enroll(
                &ts,
                &teacher,
                &cw,
                &format!("crawler{i}"),
                &format!("Crawler {i}"),
            )
            .1
        })
        .collect();
    teacher.put(
        &format!("/api/v1/courseworks/{cw}/groups"),
        json!({"mode": "form", "seed": 1, "group_size": 2}),
    );

    let encoded = base64::engine::general_purpose::STANDARD.encode(&oracle_text);
    let sha = hex_sha(oracle_text.as_bytes());
    let leaks = |body: &[u8]| {
        let text = String::from_utf8_lossy(body);
        text.contains(&marker) || text.contains(&encoded) || text.contains(&sha)
    };
    let host = ts.dir.path().display();
    let probe_suite = format!(
        "test peek_sh\n  sh cat ../solution/sort.sh; cat ../solution/*; grep -rs ORACLE-SOURCE {host} /tmp 2>/dev/null | head -1; echo done\n  expect done\nend\n\
         test peek_run\n  run sort.sh\n  stdin 2 1\n  expect 1 2\nend\n"
    );
    let mut requests = 0;
    for stage in 0..=3u8 {
        if stage > 0 {
            advance(&teacher, &cw);
        }
        for (i, s) in students.iter().enumerate() {
            let mut paths = vec![
                "/api/v1/courseworks".to_owned(),
                format!("/api/v1/courseworks/{cw}"),
                format!("/api/v1/courseworks/{cw}/spec"),
                format!("/api/v1/courseworks/{cw}/groups"),
                format!("/api/v1/courseworks/{cw}/submissions"),
                format!("/api/v1/courseworks/{cw}/submissions?mine"),
                format!("/api/v1/courseworks/{cw}/submissions?peers"),
                format!("/api/v1/courseworks/{cw}/submissions?provided"),
                format!("/api/v1/courseworks/{cw}/submissions?filter=all"),
                format!("/api/v1/courseworks/{cw}/log"),
                format!("/api/v1/courseworks/{cw}/threads?format=text"),
                format!("/api/v1/submissions/{oracle}/files"),
                format!("/api/v1/submissions/{oracle}/files/sort.sh"),
                format!("/api/v1/submissions/{oracle}/files/./sort.sh"),
                format!("/api/v1/submissions/{oracle}/files/%2e/sort.sh"),
                format!("/api/v1/submissions/{oracle}/files/x/..%2fsort.sh"),
                format!("/api/v1/submissions/{oracle}/files/sort.sh?format=raw"),
                "/api/v1/runs?mine".to_owned(),
                "/api/v1/runs?against_me".to_owned(),
                "/api/v1/runs?all".to_owned(),
            ];
            if stage == 1 || stage == 2 {
                let probe = s.upload_ok(
                    &cw,
                    "test_suite",
                    &[("probe.lst", &format!("# {stage}{i}\n{probe_suite}"))],
                );
                for suite in [&probe, &signature] {
                    let (status, body) = s.run(suite, &oracle);
                    ensure!(
                        status.is_success(),
                        "stage {stage}: oracle run refused: {body}"
                    );
                    s.wait_run(body["run_id"].as_str().unwrap());
                    paths.push(format!("/api/v1/runs/{}", body["run_id"].as_str().unwrap()));
                }
            }
            // Every submission the student can see, through every file route.
            let (_, all) = s.get(&format!("/api/v1/courseworks/{cw}/submissions?filter=all"));
            for sub in all.as_array().into_iter().flatten() {
                let id = sub["submission_id"].as_str().unwrap();
                paths.push(format!("/api/v1/submissions/{id}/files"));
                for f in sub["files"].as_array().into_iter().flatten() {
                    paths.push(format!(
                        "/api/v1/submissions/{id}/files/{}",
                        f["path"].as_str().unwrap()
                    ));
                }
            }
            for path in &paths {
                let (status, body) = s.get_bytes(path);
                requests += 1;
                ensure!(
                    !leaks(&body),
                    "stage {stage}: {path} ({status}) leaks oracle source"
                );
            }
            let (status, _) = s.get_bytes(&format!("/api/v1/submissions/{oracle}/files/sort.sh"));
            ensure!(
                !status.is_success(),
                "stage {stage}: raw oracle download returned {status}"
            );
        }
        let (status, bytes) =
            teacher.get_bytes(&format!("/api/v1/submissions/{oracle}/files/sort.sh"));
        ensure!(
            status == StatusCode::OK && bytes == oracle_text.as_bytes(),
            "stage {stage}: teacher fetch failed ({status})"
        );
    }
    ts.stop();
    Ok(format!(
        "{requests} student requests across 4 stages, no oracle bytes; teacher fetch intact"
    ))
}

fn uuid_like() -> String {
    let mut rng = rand::thread_rng();
    (0..16)
        .map(|_| format!("{:x}", rng.gen_range(0..16u8)))
        .collect()
}

fn hex_sha(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ---------------------------------------------------------------------------
// Sandbox safety

/// Path to content hash for every file under `dir`, plus a check that each
/// blob still matches its content address.
fn snapshot(dir: &Path) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let e = e.map_err(|e| e.to_string())?;
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).map_err(|e| e.to_string())?;
                let rel = p
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .replace('/', "");
                let sha = hex_sha(&bytes);
                if sha != rel {
                    return Err(format!("blob {rel} does not match its content ({sha})"));
                }
                out.insert(rel, sha);
            }
        }
    }
    Ok(out)
}

fn sandbox_safety() -> Check {
    let a = store_immutability()?;
    let b = timeout_within_grace()?;
    let c = concurrent_hostile_runs()?;
    Ok(format!("{a}; {b}; {c}"))
}

fn store_immutability() -> Check {
    let ts = TestServer::start();
    let store = ts.dir.path().join("store");
    let blobs = store.join("blobs");
    let teacher = ts.teacher();
    let f = fixture(&ts, &teacher, 2);
    let cw = &f.cw;
    let ids: Vec<&str> = f.students.iter().map(|(id, _)| id.as_str()).collect();
    teacher.put(
        &format!("/api/v1/courseworks/{cw}/groups"),
        json!({"mode": "set", "groups": [ids]}),
    );
    advance(&teacher, cw);
    let (a, b) = (&f.students[0].1, &f.students[1].1);
    let store_path = store.display().to_string();
    let a_sol = a.upload_ok(cw, "solution", &[("sort.sh", SORTER)]);
    // B's solution sorts correctly but also tries to vandalise everything it can reach.
    let vandal = format!(
        "echo x >> \"$0\" 2>/dev/null\nfind {store_path} -type f -exec sh -c 'echo x > \"$1\"' _ {{}} \\; 2>/dev/null\n\
         rm -rf {store_path} ../solution ../tests 2>/dev/null\n{SORTER}"
    );
    let b_sol = b.upload_ok(cw, "solution", &[("sort.sh", &vandal)]);
    advance(&teacher, cw);

    let mut rng = StdRng::seed_from_u64(0x5eed);
    let targets = [a_sol.clone(), b_sol.clone(), f.oracle.clone()];
    let mut planned = Vec::new();
    let mut hostile = 0;
    for i in 0..100 {
        let nums: Vec<i32> = (0..rng.gen_range(1..8))
            .map(|_| rng.gen_range(-50..50))
            .collect();
        let mut sorted = nums.clone();
        sorted.sort();
        let join = |v: &[i32]| v.iter().map(i32::to_string).collect::<Vec<_>>().join(" ");
        let writer = rng.gen_bool(0.3);
        let mut suite = format!(
            "# run {i}\ntest sorts_{i}\n  run sort.sh\n  stdin {}\n  expect {}\nend\n",
            join(&nums),
            join(&sorted)
        );
        if writer {
            hostile += 1;
            suite.push_str(&format!(
                "test writes_{i}\n  sh echo pwned > {store_path}/blobs/pwned; for f in $(find {store_path} -type f 2>/dev/null); do echo x >> $f; done; \
                 echo x > ../solution/sort.sh; rm -rf {store_path} 2>/dev/null; echo done\n  expect done\nend\n"
            ));
        }
        let suite_id = a.upload_ok(cw, "test_suite", &[("suite.lst", &suite)]);
        planned.push((
            suite_id,
            targets[rng.gen_range(0..targets.len())].clone(),
            writer,
        ));
    }
    let before = snapshot(&blobs)?;
    let started: Vec<(String, bool)> = planned
        .iter()
        .map(|(suite, target, writer)| {
            let (status, body) = a.run(suite, target);
            assert!(status.is_success(), "run request: {body}");
            (body["run_id"].as_str().unwrap().to_owned(), *writer)
        })
        .collect();
    for (run, writer) in &started {
        let r = a.wait_run(run);
        ensure!(
            r["status"] == "finished",
            "run {run} ended {}: {}",
            r["status"],
            r["sanitized_output"]
        );
        let expected = if *writer {
            vec!["pass", "pass"]
        } else {
            vec!["pass"]
        };
        ensure!(
            outcomes(&r) == expected,
            "run {run}: {:?}\n{}",
            outcomes(&r),
            r["sanitized_output"]
        );
    }
    let after = snapshot(&blobs)?;
    ensure!(before == after, "blob store changed during runs");
    ensure!(
        !blobs.join("pwned").exists(),
        "hostile file landed in the store"
    );
    ts.stop();
    Ok(format!(
        "(a) {} blobs unchanged over 100 runs, {hostile} with a file-writing attack",
        before.len()
    ))
}

fn harness_at(root: &Path) -> Harness {
    Harness::new(Sandbox::new(SandboxConfig::process(root)).unwrap())
}

fn execute(h: &Harness, profile: &RunnerProfile, suite: &str, solution: &str) -> ExecutionReport {
    h.execute(
        profile,
        &[RunFile::new("suite.lst", suite)],
        &[RunFile::new("sort.sh", solution)],
    )
    .unwrap()
}

fn timeout_within_grace() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let h = harness_at(&dir.path().join("runs"));
    let wall = 2;
    let profile = RunnerProfile {
        limits: Limits {
            wall_seconds: wall,
            cpu_seconds: wall,
            ..Limits::default()
        },
        ..RunnerProfile::line_script()
    };
    let limit = Duration::from_secs(wall) + SandboxConfig::process(dir.path()).grace;
    let mut worst = Duration::ZERO;
    for looping in [
        "while :; do :; done\n",
        "while :; do sleep 1; done\n",
        "trap '' TERM; while :; do :; done\n",
    ] {
        let started = Instant::now();
        let r = execute(&h, &profile, "test spins\n  run sort.sh\nend\n", looping);
        let took = started.elapsed();
        ensure!(
            r.status == RunStatus::TimedOut,
            "{looping:?} ended {:?}",
            r.status
        );
        ensure!(took <= limit, "{looping:?} took {took:?}, limit {limit:?}");
        worst = worst.max(took);
    }
    Ok(format!(
        "(b) infinite loops timed out after at most {worst:.2?} (limit {limit:?})"
    ))
}

fn concurrent_hostile_runs() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let h = harness_at(&dir.path().join("runs"));
    let base = h.sandbox().base_dir().display().to_string();
    let hostile = |token: &str| {
        format!(
            "echo {token} > mine\nkill -9 -1 2>/dev/null\n\
             for d in $(find {base} -type d 2>/dev/null); do echo intruder > $d/mine 2>/dev/null; rm -f $d/* 2>/dev/null; done\n\
             sleep 1\ncat mine\n"
        )
    };
    let suite =
        |token: &str| format!("test keeps_own_state\n  run sort.sh\n  expect {token}\nend\n");
    let profile = RunnerProfile::line_script();
    let solo_a = execute(&h, &profile, &suite("alpha"), &hostile("alpha"));
    let solo_b = execute(&h, &profile, &suite("beta"), &hostile("beta"));
    let (con_a, con_b) = std::thread::scope(|s| {
        let ta = s.spawn(|| execute(&h, &profile, &suite("alpha"), &hostile("alpha")));
        let tb = s.spawn(|| execute(&h, &profile, &suite("beta"), &hostile("beta")));
        (ta.join().unwrap(), tb.join().unwrap())
    });
    for (name, solo, con) in [("alpha", &solo_a, &con_a), ("beta", &solo_b, &con_b)] {
        ensure!(
            solo.verdicts.iter().all(|v| v.outcome == Outcome::Pass),
            "{name} alone: {}",
            solo.sanitized_output
        );
        ensure!(
            solo.verdicts == con.verdicts,
            "{name} perturbed: {}",
            con.sanitized_output
        );
    }
    Ok("(c) concurrent hostile runs kept their solo verdicts".into())
}

// ---------------------------------------------------------------------------
// Sanitization

fn sanitization() -> Check {
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let a = harness_at(&a_dir.path().join("r"));
    let b = harness_at(&b_dir.path().join("a/much/longer/sandbox-root"));
    let suite = "test where\n  run sort.sh\n  expect nowhere\nend\ntest env\n  sh pwd; echo $HOME $TMPDIR; ls ..\n  expect nothing\nend\n";
    let solution = "pwd\necho \"$0\" >&2\necho \"$HOME:$TMPDIR\"\nls -d \"$PWD\"/..\n";
    let ra = execute(&a, &RunnerProfile::line_script(), suite, solution);
    let rb = execute(&b, &RunnerProfile::line_script(), suite, solution);
    ensure!(
        ra.sanitized_output == rb.sanitized_output,
        "outputs differ:\n{}\n---\n{}",
        ra.sanitized_output,
        rb.sanitized_output
    );
    ensure!(ra.command_log == rb.command_log, "command logs differ");
    ensure!(
        ra.sanitized_output.contains(RUN_TOKEN),
        "nothing was sanitized: {}",
        ra.sanitized_output
    );
    for root in [a_dir.path(), b_dir.path()] {
        ensure!(
            !ra.sanitized_output.contains(&*root.to_string_lossy()),
            "host path survived"
        );
    }

    // Fuzzed strings built from tokens, with the expected result computed
    // token by token: the root becomes the token unless a path component
    // continues right after it.
    let root = "/srv/peertest-runs/4f2a";
    let sanitizer = Sanitizer::new([root]);
    let pieces = [
        root, "/", "x", "é", ".", "-", "_", " ", "\n", "\t", "<run>", ":", "\"", "/srv", "runs",
        "7",
    ];
    let continues = |s: &str| {
        s.chars()
            .next()
            .is_some_and(|c| c.is_alphanumeric() || matches!(c, '.' | '_' | '-'))
    };
    let mut rng = StdRng::seed_from_u64(1000);
    for i in 0..1000 {
        let tokens: Vec<&str> = (0..rng.gen_range(0..24))
            .map(|_| pieces[rng.gen_range(0..pieces.len())])
            .collect();
        let input: String = tokens.concat();
        let mut expected = String::new();
        for (j, t) in tokens.iter().enumerate() {
            let next = tokens.get(j + 1).copied().unwrap_or("");
            if *t == root && !continues(next) {
                expected.push_str(RUN_TOKEN);
            } else {
                expected.push_str(t);
            }
        }
        let once = sanitizer.apply(&input);
        ensure!(
            once == expected,
            "case {i}: {input:?} gave {once:?}, expected {expected:?}"
        );
        ensure!(
            sanitizer.apply(&once) == once,
            "case {i}: not idempotent on {input:?}"
        );
    }
    Ok(format!(
        "{} bytes identical across two roots; 1000 fuzzed strings idempotent",
        ra.sanitized_output.len()
    ))
}

// ---------------------------------------------------------------------------
// Grouping

fn grouping_properties() -> Check {
    let mut rng = StdRng::seed_from_u64(500);
    let mut sizes: Vec<usize> = vec![2, 3, 4, 5, 7, 11, 499, 500];
    sizes.extend((0..120).map(|_| rng.gen_range(2..=500)));
    let mut pairs_checked = 0usize;
    for (trial, &n) in sizes.iter().enumerate() {
        let target = rng.gen_range(2..=6);
        let seed: u64 = rng.gen();
        let campuses = rng.gen_range(0..4);
        let cohort: Vec<Candidate> = (0..n)
            .map(|i| {
                let campus = (campuses > 0).then(|| format!("campus{}", i % campuses));
                Candidate::new(format!("s{i:03}"), campus.as_deref())
            })
            .collect();
        let plan = form_groups(&cohort, target, seed).map_err(|e| format!("n={n}: {e}"))?;
        let again = form_groups(&cohort, target, seed).unwrap();
        ensure!(
            plan == again,
            "trial {trial}: not deterministic for seed {seed}"
        );

        let enrolled: BTreeSet<UserId> = cohort.iter().map(|c| c.user_id.clone()).collect();
        let mut seen = BTreeSet::new();
        for g in &plan.groups {
            ensure!(
                g.members.len() >= 2,
                "trial {trial}: group of {}",
                g.members.len()
            );
            for m in &g.members {
                ensure!(seen.insert(m.clone()), "trial {trial}: {m} in two groups");
            }
        }
        ensure!(
            seen == enrolled,
            "trial {trial}: groups do not cover the cohort"
        );
        let (lo, hi) = plan.groups.iter().fold((usize::MAX, 0), |(lo, hi), g| {
            (lo.min(g.members.len()), hi.max(g.members.len()))
        });
        ensure!(hi - lo <= 1, "trial {trial}: sizes range {lo}..{hi}");

        // Everyone submitted: each ordered pair inside a group appears once.
        let latest: BTreeMap<UserId, SubmissionId> = enrolled
            .iter()
            .map(|u| (u.clone(), SubmissionId(format!("sol-{}", u.0))))
            .collect();
        let owner_of: BTreeMap<SubmissionId, UserId> =
            latest.iter().map(|(u, s)| (s.clone(), u.clone())).collect();
        let mut pairs = BTreeSet::new();
        let mut total = 0;
        for u in &enrolled {
            for t in peer_targets(u, &plan, &latest) {
                total += 1;
                let owner = owner_of[&t].clone();
                ensure!(&owner != u, "trial {trial}: {u} targets itself");
                pairs.insert((u.clone(), owner));
            }
        }
        let expected: usize = plan
            .groups
            .iter()
            .map(|g| g.members.len() * (g.members.len() - 1))
            .sum();
        ensure!(
            total == expected && pairs.len() == expected,
            "trial {trial}: {total} pairs, expected {expected}"
        );
        for g in &plan.groups {
            for x in &g.members {
                for y in &g.members {
                    ensure!(
                        x == y || pairs.contains(&(x.clone(), y.clone())),
                        "trial {trial}: missing pair {x}->{y}"
                    );
                }
            }
        }
        pairs_checked += total;
    }
    Ok(format!(
        "{} cohorts up to n=500, {pairs_checked} ordered pairs",
        sizes.len()
    ))
}

// ---------------------------------------------------------------------------
// Feedback history

fn feedback_history() -> Check {
    let ts = TestServer::start();
    let teacher = ts.teacher();
    let f = fixture(&ts, &teacher, 2);
    let cw = &f.cw;
    let ids: Vec<&str> = f.students.iter().map(|(id, _)| id.as_str()).collect();
    teacher.put(
        &format!("/api/v1/courseworks/{cw}/groups"),
        json!({"mode": "set", "groups": [ids]}),
    );
    advance(&teacher, cw);
    let (a, b) = (&f.students[0].1, &f.students[1].1);
    let b_sol = b.upload_ok(cw, "solution", &[("sort.sh", DEDUP_SORTER)]);
    advance(&teacher, cw);
    let suite = a.upload_ok(cw, "test_suite", &[("dups.lst", DUPLICATES_TEST)]);
    let run = a.run_to_end(&suite, &b_sol);
    let run_id = run["run_id"].as_str().unwrap();

    let mut rng = StdRng::seed_from_u64(77);
    let mut bodies = vec!["first draft".to_owned()];
    let (_, c) = a.post(
        &format!("/api/v1/runs/{run_id}/comments"),
        json!({"body": bodies[0]}),
    );
    let comment = c["comment_id"].as_str().unwrap().to_owned();
    let (_, reply) = b.post(
        &format!("/api/v1/runs/{run_id}/comments"),
        json!({"body": "a reply"}),
    );
    let edits = rng.gen_range(3..7);
    for i in 1..=edits {
        let body = format!("revision {i} #{}", rng.gen::<u32>());
        let (status, view) = a.patch(
            &format!("/api/v1/comments/{comment}"),
            json!({"body": body}),
        );
        ensure!(status == StatusCode::OK, "edit {i}: {view}");
        bodies.push(body);
        ensure!(
            view["revision_count"] == bodies.len(),
            "edit {i}: revision_count {}",
            view["revision_count"]
        );
    }

    let (_, t) = teacher.get(&format!("/api/v1/runs/{run_id}"));
    let tc = &t["discussion"]["comments"];
    let mine = tc
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["comment_id"] == comment.as_str())
        .unwrap();
    let history: Vec<&str> = mine["revisions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["body"].as_str().unwrap())
        .collect();
    ensure!(
        history == bodies,
        "teacher history {history:?} vs {bodies:?}"
    );
    let untouched = tc
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["comment_id"] == reply["comment_id"])
        .unwrap();
    ensure!(untouched["edited"] == false, "unedited reply marked edited");

    for (who, s) in [("tester", a), ("developer", b)] {
        let (_, v) = s.get(&format!("/api/v1/runs/{run_id}"));
        let c = v["discussion"]["comments"]
            .as_array()
            .unwrap()
            .iter()
            .find(|c| c["comment_id"] == comment.as_str())
            .unwrap()
            .clone();
        ensure!(
            c["body"] == bodies.last().unwrap().as_str() && c["edited"] == true,
            "{who} sees {c}"
        );
        ensure!(c.get("revisions").is_none(), "{who} sees revision bodies");
        let text = v.to_string();
        ensure!(
            bodies[..bodies.len() - 1]
                .iter()
                .all(|old| !text.contains(old.as_str())),
            "{who} can read an old body"
        );
    }
    let (_, log) = teacher.get(&format!("/api/v1/courseworks/{cw}/log"));
    let edit_events = log
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["action"] == "comment_edited")
        .count();
    ensure!(
        edit_events == edits,
        "{edit_events} edit events for {edits} edits"
    );
    ts.stop();
    Ok(format!(
        "{edits} edits gave {} revisions, students see latest with marker",
        bodies.len()
    ))
}

// ---------------------------------------------------------------------------
// Crash recovery

struct Service {
    child: Child,
    base: String,
}

impl Drop for Service {
    // A failed check must not leave the server running.
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

fn spawn_service(config: &Path, log: &Path) -> Service {
    let out = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(log)
        .unwrap();
    let child = Command::new(env!("CARGO_BIN_EXE_peertest-server"))
        .args(["serve", "--config"])
        .arg(config)
        .stdout(Stdio::null())
        .stderr(Stdio::from(out))
        .spawn()
        .unwrap();
    let text = fs::read_to_string(config).unwrap();
    let bind = text
        .lines()
        .find_map(|l| l.strip_prefix("bind = "))
        .unwrap()
        .trim_matches('"')
        .to_owned();
    let svc = Service {
        child,
        base: format!("http://{bind}"),
    };
    let deadline = Instant::now() + Duration::from_secs(20);
    while Instant::now() < deadline {
        if client()
            .get(format!("{}/healthz", svc.base))
            .send()
            .is_ok_and(|r| r.status().is_success())
        {
            return svc;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    panic!("service did not come up; see {}", log.display());
}

fn crash_recovery() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("server.toml");
    let log = dir.path().join("server.log");
    fs::write(
        &config,
        format!(
            "bind = \"127.0.0.1:{}\"\nstorage_dir = \"store\"\nworker_count = 1\n\n[default_limits]\nwall_seconds = 20\ncpu_seconds = 20\nmemory_bytes = 268435456\noutput_bytes = 65536\n",
            free_port()
        ),
    )
    .unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_peertest-server"))
        .args(["add-teacher", "--config"])
        .arg(&config)
        .args([
            "--username",
            "teacher",
            "--display-name",
            "Tessa Teacher",
            "--password",
            TEACHER_PASSWORD,
        ])
        .stdout(Stdio::null())
        .status()
        .unwrap();
    ensure!(status.success(), "add-teacher failed");

    let mut svc = spawn_service(&config, &log);
    let teacher = login_at(&svc.base, "teacher", TEACHER_PASSWORD);
    let f = fixture_at(&svc.base, &teacher, 1);
    advance(&teacher, &f.cw);
    let a = &f.students[0].1;
    let sol = a.upload_ok(&f.cw, "solution", &[("sort.sh", SORTER)]);
    let mut runs = Vec::new();
    for i in 0..6 {
        let suite = a.upload_ok(
            &f.cw,
            "test_suite",
            &[("slow.lst", &format!("test slow_{i}\n  sh sleep 2\nend\n"))],
        );
        let (status, body) = a.run(&suite, &sol);
        ensure!(status == StatusCode::ACCEPTED, "run {i}: {status} {body}");
        runs.push(body["run_id"].as_str().unwrap().to_owned());
    }
    let (_, listed) = a.get(&format!("/api/v1/runs?mine&coursework={}", f.cw));
    let queued = listed
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["status"] == "queued")
        .count();
    ensure!(queued >= 5, "only {queued} runs queued before the kill");
    let (_, before) = teacher.get(&format!("/api/v1/courseworks/{}/log", f.cw));
    let before = before.as_array().unwrap().clone();
    svc.child.kill().unwrap();
    svc.child.wait().unwrap();

    let mut svc = spawn_service(&config, &log);
    let teacher = login_at(&svc.base, "teacher", TEACHER_PASSWORD);
    let a = login_at(&svc.base, "student0", "student-password");
    for run in &runs {
        let r = a.wait_run(run);
        ensure!(
            r["status"] == "finished" && outcomes(&r) == ["pass"],
            "run {run} after restart: {r}"
        );
    }
    let (_, listed) = a.get(&format!("/api/v1/runs?mine&coursework={}", f.cw));
    let after: BTreeSet<String> = listed
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["run_id"].as_str().unwrap().to_owned())
        .collect();
    ensure!(
        after == runs.iter().cloned().collect::<BTreeSet<_>>(),
        "run ids changed across restart"
    );

    let (_, events) = teacher.get(&format!("/api/v1/courseworks/{}/log", f.cw));
    let events = events.as_array().unwrap();
    ensure!(
        events[..before.len()] == before[..],
        "events before the crash were altered"
    );
    let ids: BTreeSet<i64> = events
        .iter()
        .map(|e| e["event_id"].as_i64().unwrap())
        .collect();
    ensure!(ids.len() == events.len(), "duplicate event ids");
    for run in &runs {
        for action in ["run_requested", "run_finished"] {
            let n = events
                .iter()
                .filter(|e| e["action"] == action && e["subject_id"] == run.as_str())
                .count();
            ensure!(n == 1, "run {run}: {n} {action} events");
        }
    }
    let keys: BTreeSet<(String, String, String)> = events
        .iter()
        .map(|e| {
            (
                e["action"].to_string(),
                e["subject_id"].to_string(),
                e["detail"].to_string(),
            )
        })
        .collect();
    ensure!(keys.len() == events.len(), "duplicated activity events");
    svc.child.kill().unwrap();
    svc.child.wait().unwrap();
    Ok(format!("killed with {queued} queued runs; all {} finished once after restart, {} events, none duplicated", runs.len(), events.len()))
}
