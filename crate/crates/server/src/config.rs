//! Server configuration file.
//!
//! ```toml
//! bind = "127.0.0.1:8080"
//! storage_dir = "/var/lib/peertest"
//! worker_count = 2
//! runner_profiles = ["/etc/peertest/python.toml"]
//!
//! [sandbox]
//! backend = "process"              # or "container"
//! base_dir = "/var/tmp/peertest-runs"
//!
//! [default_limits]
//! wall_seconds = 10
//! cpu_seconds = 10
//! memory_bytes = 268435456
//! output_bytes = 65536
//! ```

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use peertest_core::lifecycle::DEFAULT_UPLOAD_LIMIT;
use peertest_harness::profile::{self, Limits, RunnerProfile};
use peertest_harness::sandbox::{Backend, SandboxConfig, DEFAULT_GRACE};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Process,
    Container,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxSection {
    #[serde(default = "default_backend")]
    pub backend: BackendKind,
    /// Parent of per-run work trees. Must not lie inside `storage_dir`.
    pub base_dir: Option<PathBuf>,
    /// Container runtime prefix, e.g. `["docker", "run", "--rm", "--network=none",
    /// "-v", "{work_dir}:{work_dir}", "-w", "{work_dir}/scratch", "image"]`.
    #[serde(default)]
    pub container_command: Vec<String>,
    #[serde(default = "default_grace_millis")]
    pub grace_millis: u64,
}

impl Default for SandboxSection {
    fn default() -> Self {
        Self {
            backend: default_backend(),
            base_dir: None,
            container_command: Vec::new(),
            grace_millis: default_grace_millis(),
        }
    }
}

fn default_backend() -> BackendKind {
    BackendKind::Process
}

fn default_grace_millis() -> u64 {
    DEFAULT_GRACE.as_millis() as u64
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    pub storage_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub worker_count: usize,
    #[serde(default)]
    pub sandbox: SandboxSection,
    #[serde(default)]
    pub default_limits: Limits,
    /// Profile files; the built-in line-script profile is always present.
    #[serde(default)]
    pub runner_profiles: Vec<PathBuf>,
    #[serde(default = "default_upload_limit")]
    pub upload_limit_bytes: u64,
    #[serde(default = "default_session_ttl")]
    pub session_ttl_seconds: u64,
}

fn default_bind() -> SocketAddr {
    "127.0.0.1:8080".parse().unwrap()
}

fn default_workers() -> usize {
    2
}

fn default_upload_limit() -> u64 {
    DEFAULT_UPLOAD_LIMIT
}

fn default_session_ttl() -> u64 {
    12 * 3600
}

impl ServerConfig {
    /// A config with every default filled in; used by tests and embedding.
    pub fn new(storage_dir: impl Into<PathBuf>) -> Self {
        Self {
            bind: default_bind(),
            storage_dir: storage_dir.into(),
            worker_count: default_workers(),
            sandbox: SandboxSection::default(),
            default_limits: Limits::default(),
            runner_profiles: Vec::new(),
            upload_limit_bytes: default_upload_limit(),
            session_ttl_seconds: default_session_ttl(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg: ServerConfig = toml::from_str(&text).map_err(|e| ConfigError::Invalid {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        // Relative paths are relative to the config file.
        let dir = path.parent().unwrap_or(Path::new("."));
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        anchor(&mut cfg.storage_dir);
        if let Some(b) = cfg.sandbox.base_dir.as_mut() {
            anchor(b);
        }
        cfg.runner_profiles.iter_mut().for_each(anchor);
        cfg.validate().map_err(|message| ConfigError::Invalid {
            path: path.to_owned(),
            message,
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.worker_count == 0 {
            return Err("worker_count must be at least 1".into());
        }
        self.default_limits
            .validate()
            .map_err(|e| format!("default_limits: {e}"))?;
        if self.upload_limit_bytes == 0 {
            return Err("upload_limit_bytes must be positive".into());
        }
        if self.session_ttl_seconds == 0 {
            return Err("session_ttl_seconds must be positive".into());
        }
        if self.sandbox.backend == BackendKind::Container
            && self.sandbox.container_command.is_empty()
        {
            return Err("sandbox.container_command is required for the container backend".into());
        }
        let base = self.sandbox_base();
        if lexically_within(&base, &self.storage_dir) {
            return Err(format!(
                "sandbox.base_dir {} must not lie inside storage_dir {}",
                base.display(),
                self.storage_dir.display()
            ));
        }
        Ok(())
    }

    pub fn sandbox_base(&self) -> PathBuf {
        self.sandbox.base_dir.clone().unwrap_or_else(|| {
            let name = self
                .storage_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "peertest".into());
            let parent = self.storage_dir.parent().unwrap_or(Path::new("/"));
            parent.join(format!("{name}-runs"))
        })
    }

    pub fn sandbox_config(&self) -> SandboxConfig {
        SandboxConfig {
            backend: match self.sandbox.backend {
                BackendKind::Process => Backend::Process,
                BackendKind::Container => Backend::Container {
                    prefix: self.sandbox.container_command.clone(),
                },
            },
            base_dir: self.sandbox_base(),
            hidden_paths: vec![self.storage_dir.clone()],
            grace: Duration::from_millis(self.sandbox.grace_millis),
        }
    }

    pub fn session_ttl(&self) -> Duration {
        Duration::from_secs(self.session_ttl_seconds)
    }

    /// The built-in profile plus every configured profile file, by id.
    pub fn load_runner_profiles(&self) -> Result<BTreeMap<String, RunnerProfile>, String> {
        let mut builtin = RunnerProfile::line_script();
        builtin.limits = self.default_limits;
        let mut out = BTreeMap::from([(builtin.profile_id.clone(), builtin)]);
        for path in &self.runner_profiles {
            for p in profile::load_profiles(path, self.default_limits).map_err(|e| e.to_string())? {
                if out.contains_key(&p.profile_id) {
                    return Err(format!(
                        "{}: duplicate profile id `{}`",
                        path.display(),
                        p.profile_id
                    ));
                }
                out.insert(p.profile_id.clone(), p);
            }
        }
        Ok(out)
    }
}

fn lexically_within(path: &Path, dir: &Path) -> bool {
    let canon = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    canon(path).starts_with(canon(dir))
}
