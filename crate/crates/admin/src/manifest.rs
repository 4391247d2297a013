//! Coursework manifests: one TOML file naming the title, the spec
//! document, the runner profile and the directories of teacher material.
//!
//! ```toml
//! title = "QuickSort"
//! spec = "spec.md"
//! runner_profile = "profile.toml"
//! oracle = "oracle"
//! signature_tests = "signature"
//! teacher_tests = "teacher-tests"     # optional
//!
//! [deadlines]                         # optional, keyed by stage name
//! self_testing = 2026-11-02T17:00:00Z
//! ```
//!
//! Relative paths resolve against the manifest's own directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::client::Client;
use crate::AdminError;

const STAGE_NAMES: [&str; 4] = ["setup", "self_testing", "peer_testing", "teacher_feedback"];

#[derive(Debug, Clone, PartialEq)]
pub struct CourseworkManifest {
    pub title: String,
    pub spec: PathBuf,
    pub runner_profile: PathBuf,
    pub oracle: PathBuf,
    pub signature_tests: PathBuf,
    pub teacher_tests: Option<PathBuf>,
    /// Stage number to RFC 3339 timestamp.
    pub deadlines: BTreeMap<u8, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    title: Option<String>,
    spec: Option<PathBuf>,
    runner_profile: Option<PathBuf>,
    oracle: Option<PathBuf>,
    signature_tests: Option<PathBuf>,
    teacher_tests: Option<PathBuf>,
    #[serde(default)]
    deadlines: BTreeMap<String, toml::value::Datetime>,
}

impl CourseworkManifest {
    /// Reads and validates a manifest. Every problem is reported at once.
    pub fn load(path: &Path) -> Result<Self, AdminError> {
        let text = fs::read_to_string(path).map_err(|e| {
            AdminError::Validation(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, AdminError> {
        let raw: Raw =
            toml::from_str(text).map_err(|e| AdminError::Validation(format!("manifest: {e}")))?;
        let mut problems = Vec::new();
        let title = match raw.title.as_deref().map(str::trim) {
            Some(t) if !t.is_empty() => t.to_owned(),
            _ => {
                problems.push("missing field `title`".to_owned());
                String::new()
            }
        };
        let mut required = |field: &str, value: Option<PathBuf>, dir: bool| -> PathBuf {
            match value {
                None => {
                    problems.push(format!("missing field `{field}`"));
                    PathBuf::new()
                }
                Some(p) => {
                    let p = base.join(p);
                    check_path(field, &p, dir, &mut problems);
                    p
                }
            }
        };
        let spec = required("spec", raw.spec, false);
        let runner_profile = required("runner_profile", raw.runner_profile, false);
        let oracle = required("oracle", raw.oracle, true);
        let signature_tests = required("signature_tests", raw.signature_tests, true);
        let teacher_tests = raw.teacher_tests.map(|p| {
            let p = base.join(p);
            check_path("teacher_tests", &p, true, &mut problems);
            p
        });
        let mut deadlines = BTreeMap::new();
        for (name, at) in raw.deadlines {
            match STAGE_NAMES.iter().position(|s| *s == name) {
                None => problems.push(format!("deadlines: unknown stage `{name}`")),
                Some(_) if at.offset.is_none() || at.date.is_none() || at.time.is_none() => {
                    problems.push(format!(
                        "deadlines.{name}: needs a full date, time and offset"
                    ))
                }
                Some(stage) => {
                    deadlines.insert(stage as u8, at.to_string());
                }
            }
        }
        if !problems.is_empty() {
            return Err(AdminError::Validation(format!(
                "invalid manifest: {}",
                problems.join("; ")
            )));
        }
        Ok(Self {
            title,
            spec,
            runner_profile,
            oracle,
            signature_tests,
            teacher_tests,
            deadlines,
        })
    }
}

fn check_path(field: &str, path: &Path, dir: bool, problems: &mut Vec<String>) {
    match fs::metadata(path) {
        Err(_) => problems.push(format!("`{field}`: {} does not exist", path.display())),
        Ok(m) if dir && !m.is_dir() => {
            problems.push(format!("`{field}`: {} is not a directory", path.display()))
        }
        Ok(m) if !dir && !m.is_file() => {
            problems.push(format!("`{field}`: {} is not a file", path.display()))
        }
        Ok(_) if dir => {
            if fs::read_dir(path)
                .map(|mut d| d.next().is_none())
                .unwrap_or(true)
            {
                problems.push(format!(
                    "`{field}`: {} is empty or unreadable",
                    path.display()
                ));
            }
        }
        Ok(_) => {
            if fs::File::open(path).is_err() {
                problems.push(format!("`{field}`: {} is unreadable", path.display()));
            }
        }
    }
}

/// Every regular file under `dir`, keyed by its slash-separated relative path.
pub fn collect_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, AdminError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> std::io::Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            let kind = e.file_type()?;
            if kind.is_dir() {
                walk(root, &path, out)?;
            } else if kind.is_file() {
                let rel = path.strip_prefix(root).expect("walked below root");
                let rel: Vec<String> = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect();
                out.push((rel.join("/"), fs::read(&path)?));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)
        .map_err(|e| AdminError::Validation(format!("{}: {e}", dir.display())))?;
    Ok(out)
}

/// What an apply did, for reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Applied {
    pub coursework_id: String,
    pub created: bool,
    /// Kinds whose material changed and was uploaded.
    pub uploaded: Vec<String>,
}

/// Creates the coursework, or updates the one with the same title, and
/// uploads any teacher material that differs from what is stored.
pub fn apply(client: &Client, manifest: &CourseworkManifest) -> Result<Applied, AdminError> {
    let read =
        |p: &Path| fs::read(p).map_err(|e| AdminError::Validation(format!("{}: {e}", p.display())));
    let spec_name = manifest
        .spec
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "spec".into());
    let spec = json!({
        "path": spec_name,
        "content_base64": base64::engine::general_purpose::STANDARD.encode(read(&manifest.spec)?),
    });
    let profile = String::from_utf8(read(&manifest.runner_profile)?)
        .map_err(|_| AdminError::Validation("runner profile is not UTF-8".into()))?;
    let body = json!({
        "title": manifest.title,
        "runner_profile": profile,
        "stage_deadlines": manifest.deadlines,
        "spec": spec,
    });

    let existing: Vec<Value> = client.get(&format!(
        "/courseworks?title={}",
        encode_query(&manifest.title)
    ))?;
    let (id, created) = match existing.as_slice() {
        [] => {
            let cw: Value = client.post("/courseworks", &body)?;
            (string_field(&cw, "coursework_id")?, true)
        }
        [one] => {
            let id = string_field(one, "coursework_id")?;
            let _: Value = client.patch(&format!("/courseworks/{id}"), &body)?;
            (id, false)
        }
        _ => {
            return Err(AdminError::Validation(format!(
                "{} courseworks are titled {:?}; rename one first",
                existing.len(),
                manifest.title
            )))
        }
    };

    let provided: Vec<Value> = client.get(&format!("/courseworks/{id}/submissions?provided"))?;
    let mut uploaded = Vec::new();
    let mut material = vec![
        ("oracle_solution", &manifest.oracle),
        ("signature_test", &manifest.signature_tests),
    ];
    if let Some(t) = &manifest.teacher_tests {
        material.push(("teacher_test", t));
    }
    for (kind, dir) in material {
        let files = collect_files(dir)?;
        if !same_as_latest(&provided, kind, &files) {
            client.upload(&id, kind, kind, &files)?;
            uploaded.push(kind.to_owned());
        }
    }
    Ok(Applied {
        coursework_id: id,
        created,
        uploaded,
    })
}

fn same_as_latest(provided: &[Value], kind: &str, files: &[(String, Vec<u8>)]) -> bool {
    let Some(latest) = provided
        .iter()
        .find(|s| s["kind"] == kind && s["name"] == kind && s["latest"] == true)
    else {
        return false;
    };
    let mut stored: Vec<(String, String)> = latest["files"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|f| {
            (
                f["path"].as_str().unwrap_or("").to_owned(),
                f["sha256"].as_str().unwrap_or("").to_owned(),
            )
        })
        .collect();
    let mut local: Vec<(String, String)> = files
        .iter()
        .map(|(p, b)| (p.clone(), hex::encode(Sha256::digest(b))))
        .collect();
    stored.sort();
    local.sort();
    stored == local
}

pub(crate) fn string_field(v: &Value, key: &str) -> Result<String, AdminError> {
    v[key]
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| AdminError::Transport(format!("response lacks `{key}`")))
}

/// Percent-encodes a query value.
pub(crate) fn encode_query(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => {
                out.push(b as char)
            }
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}
