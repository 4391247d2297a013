#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use peertest_core::Role;
use peertest_server::{Server, ServerConfig};
use reqwest::blocking::{multipart, Client};
use reqwest::StatusCode;
use serde_json::{json, Value};

pub const TEACHER_PASSWORD: &str = "teacher-password";

pub struct TestServer {
    pub server: Option<Server>,
    pub base: String,
    pub dir: tempfile::TempDir,
}

impl TestServer {
    pub fn start() -> Self {
        Self::start_with(|_| {})
    }

    pub fn start_with(tweak: impl FnOnce(&mut ServerConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config_for(dir.path());
        tweak(&mut cfg);
        let server = Server::start(cfg).unwrap();
        server
            .platform()
            .create_user(
                "teacher",
                "Tessa Teacher",
                Role::Teacher,
                None,
                TEACHER_PASSWORD,
            )
            .unwrap();
        let base = format!("http://{}", server.addr());
        Self {
            server: Some(server),
            base,
            dir,
        }
    }

    pub fn anon(&self) -> Api {
        Api {
            base: self.base.clone(),
            client: client(),
            token: None,
        }
    }

    pub fn teacher(&self) -> Api {
        self.login("teacher", TEACHER_PASSWORD)
    }

    pub fn login(&self, username: &str, password: &str) -> Api {
        login_at(&self.base, username, password)
    }

    pub fn stop(mut self) {
        if let Some(s) = self.server.take() {
            s.shutdown().unwrap();
        }
    }
}

pub fn login_at(base: &str, username: &str, password: &str) -> Api {
    let mut api = Api {
        base: base.to_owned(),
        client: client(),
        token: None,
    };
    let (status, body) = api.post(
        "/api/v1/login",
        json!({"username": username, "password": password}),
    );
    assert_eq!(status, StatusCode::OK, "login {username}: {body}");
    api.token = Some(body["token"].as_str().unwrap().to_owned());
    api
}

pub fn config_for(dir: &Path) -> ServerConfig {
    let mut cfg = ServerConfig::new(dir.join("store"));
    cfg.bind = "127.0.0.1:0".parse().unwrap();
    cfg.worker_count = 2;
    cfg.default_limits.wall_seconds = 5;
    cfg.default_limits.cpu_seconds = 5;
    cfg
}

pub fn client() -> Client {
    Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .unwrap()
}

#[derive(Clone)]
pub struct Api {
    pub base: String,
    pub client: Client,
    pub token: Option<String>,
}

fn decode(resp: reqwest::blocking::Response) -> (StatusCode, Value) {
    let status = resp.status();
    let text = resp.text().unwrap();
    let value = serde_json::from_str(&text).unwrap_or(Value::String(text));
    (status, value)
}

impl Api {
    fn auth(&self, req: reqwest::blocking::RequestBuilder) -> reqwest::blocking::RequestBuilder {
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    pub fn get(&self, path: &str) -> (StatusCode, Value) {
        decode(
            self.auth(self.client.get(format!("{}{path}", self.base)))
                .send()
                .unwrap(),
        )
    }

    pub fn get_bytes(&self, path: &str) -> (StatusCode, Vec<u8>) {
        let resp = self
            .auth(self.client.get(format!("{}{path}", self.base)))
            .send()
            .unwrap();
        (resp.status(), resp.bytes().unwrap().to_vec())
    }

    pub fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        decode(
            self.auth(self.client.post(format!("{}{path}", self.base)))
                .json(&body)
                .send()
                .unwrap(),
        )
    }

    pub fn put(&self, path: &str, body: Value) -> (StatusCode, Value) {
        decode(
            self.auth(self.client.put(format!("{}{path}", self.base)))
                .json(&body)
                .send()
                .unwrap(),
        )
    }

    pub fn patch(&self, path: &str, body: Value) -> (StatusCode, Value) {
        decode(
            self.auth(self.client.patch(format!("{}{path}", self.base)))
                .json(&body)
                .send()
                .unwrap(),
        )
    }

    pub fn upload(&self, cw: &str, kind: &str, files: &[(&str, &str)]) -> (StatusCode, Value) {
        let mut form = multipart::Form::new().text("kind", kind.to_owned());
        for (path, content) in files {
            form = form.part(
                "file",
                multipart::Part::bytes(content.as_bytes().to_vec()).file_name(path.to_string()),
            );
        }
        decode(
            self.auth(
                self.client
                    .post(format!("{}/api/v1/courseworks/{cw}/submissions", self.base)),
            )
            .multipart(form)
            .send()
            .unwrap(),
        )
    }

    /// Uploads and returns the submission id, asserting success.
    pub fn upload_ok(&self, cw: &str, kind: &str, files: &[(&str, &str)]) -> String {
        let (status, body) = self.upload(cw, kind, files);
        assert_eq!(status, StatusCode::CREATED, "upload {kind}: {body}");
        body["submission_id"].as_str().unwrap().to_owned()
    }

    pub fn run(&self, suite: &str, target: &str) -> (StatusCode, Value) {
        self.post(
            "/api/v1/runs",
            json!({"suite_id": suite, "target_id": target}),
        )
    }

    /// Requests a run and polls until it is terminal.
    pub fn run_to_end(&self, suite: &str, target: &str) -> Value {
        let (status, body) = self.run(suite, target);
        assert!(status.is_success(), "run request: {status} {body}");
        self.wait_run(body["run_id"].as_str().unwrap())
    }

    pub fn wait_run(&self, run: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let (status, body) = self.get(&format!("/api/v1/runs/{run}"));
            assert_eq!(status, StatusCode::OK, "{body}");
            if !matches!(body["status"].as_str(), Some("queued") | Some("running")) {
                return body;
            }
            assert!(Instant::now() < deadline, "run {run} never finished");
            std::thread::sleep(Duration::from_millis(50));
        }
    }
}

pub const SORTER: &str = "read line\nprintf '%s\\n' $line | sort -n | paste -sd ' ' -\n";
pub const DEDUP_SORTER: &str = "read line\nprintf '%s\\n' $line | sort -nu | paste -sd ' ' -\n";
pub const SIGNATURE_TEST: &str =
    "test reads_a_line_and_prints_a_line\n  run sort.sh\n  stdin 2 1\n  expect 1 2\nend\n";
pub const DUPLICATES_TEST: &str =
    "test keeps_duplicates\n  run sort.sh\n  stdin 3 1 3 2\n  expect 1 2 3 3\nend\n";

/// A coursework in stage 0 with oracle and signature test, and `n`
/// students enrolled with their sessions.
pub struct Fixture {
    pub cw: String,
    pub oracle: String,
    pub signature: String,
    pub students: Vec<(String, Api)>,
}

pub fn fixture(ts: &TestServer, teacher: &Api, n: usize) -> Fixture {
    fixture_at(&ts.base, teacher, n)
}

pub fn fixture_at(base: &str, teacher: &Api, n: usize) -> Fixture {
    let (status, cw) = teacher.post("/api/v1/courseworks", json!({"title": "QuickSort"}));
    assert_eq!(status, StatusCode::CREATED, "{cw}");
    let cw = cw["coursework_id"].as_str().unwrap().to_owned();
    let oracle = teacher.upload_ok(&cw, "oracle_solution", &[("sort.sh", SORTER)]);
    let signature = teacher.upload_ok(&cw, "signature_test", &[("signature.lst", SIGNATURE_TEST)]);
    let mut students = Vec::new();
    for i in 0..n {
        let username = format!("student{i}");
        let (status, body) = teacher.post(
            &format!("/api/v1/courseworks/{cw}/enroll"),
            json!({"username": username, "display_name": format!("Student Number{i}"), "password": "student-password"}),
        );
        assert_eq!(status, StatusCode::CREATED, "{body}");
        students.push((
            body["user_id"].as_str().unwrap().to_owned(),
            login_at(base, &username, "student-password"),
        ));
    }
    Fixture {
        cw,
        oracle,
        signature,
        students,
    }
}

pub fn advance(teacher: &Api, cw: &str) -> Value {
    let (status, body) = teacher.post(&format!("/api/v1/courseworks/{cw}/advance"), json!({}));
    assert_eq!(status, StatusCode::OK, "{body}");
    body
}
