//! On-disk layout of a storage directory:
//!
//! ```text
//! peertest-store.json   format marker, checked at startup
//! peertest.sqlite       entities, runs and the activity log
//! blobs/                content-addressed uploaded files
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use crate::blobs::BlobStore;

pub const MANIFEST_FILE: &str = "peertest-store.json";
pub const DATABASE_FILE: &str = "peertest.sqlite";
const FORMAT: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage manifest {path} is unreadable or corrupt: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },
    #[error("storage manifest {path} has format {found}, this server understands format {FORMAT}")]
    UnsupportedFormat { path: PathBuf, found: u32 },
    #[error("storage directory {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("database {path}: {source}")]
    Database {
        path: PathBuf,
        source: rusqlite::Error,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS users (
    user_id       TEXT PRIMARY KEY,
    username      TEXT NOT NULL UNIQUE,
    display_name  TEXT NOT NULL,
    role          TEXT NOT NULL,
    campus        TEXT,
    password_hash TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS sessions (
    token_hash TEXT PRIMARY KEY,
    user_id    TEXT NOT NULL REFERENCES users(user_id),
    expires_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS courseworks (
    coursework_id     TEXT PRIMARY KEY,
    title             TEXT NOT NULL,
    spec_path         TEXT,
    spec_sha256       TEXT,
    spec_size         INTEGER,
    stage             INTEGER NOT NULL,
    runner_profile_id TEXT NOT NULL,
    runner_profile    TEXT,
    stage_deadlines   TEXT NOT NULL,
    group_size_target INTEGER NOT NULL,
    pseudonym_seed    INTEGER NOT NULL,
    next_pseudonym    INTEGER NOT NULL,
    created_by        TEXT NOT NULL REFERENCES users(user_id),
    created_at        TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS enrollments (
    coursework_id TEXT NOT NULL REFERENCES courseworks(coursework_id),
    user_id       TEXT NOT NULL REFERENCES users(user_id),
    pseudonym     TEXT NOT NULL,
    enrolled_at   TEXT NOT NULL,
    PRIMARY KEY (coursework_id, user_id),
    UNIQUE (coursework_id, pseudonym)
);
CREATE TABLE IF NOT EXISTS group_members (
    coursework_id TEXT NOT NULL,
    group_id      TEXT NOT NULL,
    user_id       TEXT NOT NULL,
    PRIMARY KEY (coursework_id, user_id),
    FOREIGN KEY (coursework_id, user_id) REFERENCES enrollments(coursework_id, user_id)
);
CREATE TABLE IF NOT EXISTS submissions (
    submission_id TEXT PRIMARY KEY,
    coursework_id TEXT NOT NULL REFERENCES courseworks(coursework_id),
    owner_id      TEXT NOT NULL REFERENCES users(user_id),
    kind          TEXT NOT NULL,
    name          TEXT NOT NULL,
    version       INTEGER NOT NULL,
    created_at    TEXT NOT NULL,
    UNIQUE (coursework_id, owner_id, kind, name, version)
);
CREATE TABLE IF NOT EXISTS submission_files (
    submission_id TEXT NOT NULL REFERENCES submissions(submission_id),
    seq           INTEGER NOT NULL,
    path          TEXT NOT NULL,
    sha256        TEXT NOT NULL,
    size          INTEGER NOT NULL,
    PRIMARY KEY (submission_id, seq),
    UNIQUE (submission_id, path)
);
CREATE TABLE IF NOT EXISTS runs (
    run_id          TEXT PRIMARY KEY,
    coursework_id   TEXT NOT NULL REFERENCES courseworks(coursework_id),
    requester_id    TEXT NOT NULL REFERENCES users(user_id),
    suite_id        TEXT NOT NULL REFERENCES submissions(submission_id),
    target_id       TEXT NOT NULL REFERENCES submissions(submission_id),
    queue_position  INTEGER NOT NULL UNIQUE,
    status          TEXT NOT NULL,
    error_category  TEXT,
    error_message   TEXT,
    verdicts        TEXT NOT NULL DEFAULT '[]',
    sanitized_output TEXT NOT NULL DEFAULT '',
    command_log     TEXT NOT NULL DEFAULT '[]',
    exit_code       INTEGER,
    queued_at       TEXT NOT NULL,
    started_at      TEXT,
    finished_at     TEXT,
    wall_millis     INTEGER,
    cpu_millis      INTEGER,
    max_rss_bytes   INTEGER,
    UNIQUE (requester_id, suite_id, target_id)
);
CREATE TABLE IF NOT EXISTS threads (
    thread_id    TEXT PRIMARY KEY,
    run_id       TEXT NOT NULL UNIQUE REFERENCES runs(run_id),
    tester_id    TEXT NOT NULL,
    developer_id TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS comments (
    comment_id TEXT PRIMARY KEY,
    thread_id  TEXT NOT NULL REFERENCES threads(thread_id),
    author_id  TEXT NOT NULL REFERENCES users(user_id),
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS revisions (
    comment_id TEXT NOT NULL REFERENCES comments(comment_id),
    seq        INTEGER NOT NULL,
    body       TEXT NOT NULL,
    at         TEXT NOT NULL,
    PRIMARY KEY (comment_id, seq)
);
CREATE TABLE IF NOT EXISTS events (
    event_id      INTEGER PRIMARY KEY AUTOINCREMENT,
    coursework_id TEXT NOT NULL,
    actor_id      TEXT NOT NULL,
    action        TEXT NOT NULL,
    subject_id    TEXT NOT NULL,
    detail        TEXT NOT NULL,
    timestamp     TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS events_by_coursework ON events(coursework_id, event_id);
CREATE INDEX IF NOT EXISTS runs_by_status ON runs(status, queue_position);
";

/// Opened storage: the database connection and the blob store.
pub struct Storage {
    pub conn: Connection,
    pub blobs: BlobStore,
    pub dir: PathBuf,
}

impl Storage {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io {
            path: dir.to_owned(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        check_manifest(dir)?;
        let db_path = dir.join(DATABASE_FILE);
        let db_err = |source| StoreError::Database {
            path: db_path.clone(),
            source,
        };
        let conn = Connection::open(&db_path).map_err(db_err)?;
        conn.pragma_update(None, "journal_mode", "WAL")
            .map_err(db_err)?;
        conn.pragma_update(None, "synchronous", "FULL")
            .map_err(db_err)?;
        conn.pragma_update(None, "foreign_keys", "ON")
            .map_err(db_err)?;
        conn.execute_batch(SCHEMA).map_err(db_err)?;
        let blobs = BlobStore::open(dir.join("blobs")).map_err(io)?;
        Ok(Self {
            conn,
            blobs,
            dir: dir.to_owned(),
        })
    }
}

fn check_manifest(dir: &Path) -> Result<(), StoreError> {
    let path = dir.join(MANIFEST_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => {
            let m: Manifest =
                serde_json::from_str(&text).map_err(|e| StoreError::CorruptManifest {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            if m.format != FORMAT {
                return Err(StoreError::UnsupportedFormat {
                    path,
                    found: m.format,
                });
            }
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            if dir.join(DATABASE_FILE).exists() {
                return Err(StoreError::CorruptManifest {
                    path,
                    reason: "missing while a database is present".into(),
                });
            }
            let body =
                serde_json::to_string(&Manifest { format: FORMAT }).expect("manifest serializes");
            fs::write(&path, body + "\n").map_err(|source| StoreError::Io { path, source })
        }
        Err(e) => Err(StoreError::CorruptManifest {
            path,
            reason: e.to_string(),
        }),
    }
}
