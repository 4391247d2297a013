//! A thin blocking client for the `/api/v1` endpoints the tool uses.

use std::time::Duration;

use reqwest::blocking::{multipart, Client as Http, RequestBuilder, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::AdminError;

pub struct Client {
    base: String,
    http: Http,
    token: Option<String>,
}

impl Client {
    pub fn new(server: &str, token: Option<String>) -> Result<Self, AdminError> {
        let http = Http::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| AdminError::Transport(e.to_string()))?;
        Ok(Self {
            base: server.trim_end_matches('/').to_owned(),
            http,
            token,
        })
    }

    /// Exchanges credentials for a session token.
    pub fn login(&mut self, username: &str, password: &str) -> Result<String, AdminError> {
        let body: Value = self.send(
            self.http
                .post(self.url("/login"))
                .json(&serde_json::json!({"username": username, "password": password})),
        )?;
        let token = body["token"]
            .as_str()
            .ok_or_else(|| AdminError::Transport("login response carried no token".into()))?
            .to_owned();
        self.token = Some(token.clone());
        Ok(token)
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, AdminError> {
        self.send(self.http.get(self.url(path)))
    }

    pub fn get_text(&self, path: &str) -> Result<String, AdminError> {
        let resp = self.dispatch(self.http.get(self.url(path)))?;
        resp.text()
            .map_err(|e| AdminError::Transport(e.to_string()))
    }

    pub fn post<T: DeserializeOwned>(&self, path: &str, body: &Value) -> Result<T, AdminError> {
        self.send(self.http.post(self.url(path)).json(body))
    }

    pub fn put<T: DeserializeOwned>(&self, path: &str, body: &Value) -> Result<T, AdminError> {
        self.send(self.http.put(self.url(path)).json(body))
    }

    pub fn patch<T: DeserializeOwned>(&self, path: &str, body: &Value) -> Result<T, AdminError> {
        self.send(self.http.patch(self.url(path)).json(body))
    }

    /// Uploads one submission; each file part is named by its relative path.
    pub fn upload(
        &self,
        coursework: &str,
        kind: &str,
        name: &str,
        files: &[(String, Vec<u8>)],
    ) -> Result<Value, AdminError> {
        let mut form = multipart::Form::new()
            .text("kind", kind.to_owned())
            .text("name", name.to_owned());
        for (path, bytes) in files {
            form = form.part(
                "file",
                multipart::Part::bytes(bytes.clone()).file_name(path.clone()),
            );
        }
        self.send(
            self.http
                .post(self.url(&format!("/courseworks/{coursework}/submissions")))
                .multipart(form),
        )
    }

    fn url(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.base)
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, AdminError> {
        let resp = self.dispatch(req)?;
        resp.json()
            .map_err(|e| AdminError::Transport(format!("unreadable response: {e}")))
    }

    fn dispatch(&self, req: RequestBuilder) -> Result<Response, AdminError> {
        let req = match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req
            .send()
            .map_err(|e| AdminError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body: Value = resp.json().unwrap_or(Value::Null);
        let code = body["code"].as_str().unwrap_or("unknown").to_owned();
        let message = body["message"].as_str().unwrap_or("no details").to_owned();
        Err(match status {
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
                AdminError::Auth(format!("{code}: {message}"))
            }
            s if s.is_server_error() => {
                AdminError::Transport(format!("server error {s}: {message}"))
            }
            _ => AdminError::Rejected { code, message },
        })
    }
}
