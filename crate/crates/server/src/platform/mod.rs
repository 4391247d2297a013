//! Every operation of the platform, with its permission checks and the
//! activity event it records. The HTTP layer is a thin shell over this.
//!
//! All state lives behind one database connection guarded by a mutex, which
//! serialises writers; each operation runs in its own transaction and
//! writes its activity event in that same transaction.

mod courseworks;
mod feedback;
mod log;
mod runs;
mod submissions;

use std::collections::BTreeMap;
use std::sync::mpsc::Sender;
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, SecondsFormat, Utc};
use peertest_core::grouping::GroupingPlan;
use peertest_core::monitoring::{Action, ActivityEvent};
use peertest_core::permissions::{Actor, Capability, Decision};
use peertest_core::{
    CoreError, Coursework, CourseworkId, Enrollment, GroupId, PeerGroup, Role, RunId, Stage,
    StoredFile, Submission, SubmissionId, SubmissionKind, User, UserId,
};
use peertest_harness::profile::RunnerProfile;
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use crate::auth;
use crate::config::ServerConfig;
use crate::error::{ApiError, ApiResult};
use crate::store::Storage;

pub use courseworks::{
    CourseworkPatch, CourseworkView, EnrollRequest, EnrollResult, GroupRequest, GroupView,
    GroupingView, NewCoursework, SpecDocument,
};
pub use feedback::{ThreadView, TranscriptExport};
pub use runs::{RunFilter, RunJob, RunRef, RunView};
pub use submissions::{FileView, SubmissionFilter, SubmissionView, Upload};

pub struct Platform {
    storage: Mutex<Storage>,
    config: ServerConfig,
    profiles: BTreeMap<String, RunnerProfile>,
    queue: Mutex<Option<Sender<RunId>>>,
}

/// How a person is shown to a particular viewer. Students see other
/// students only by pseudonym.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Person {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudonym: Option<String>,
    pub role: Role,
    /// The person is the viewer.
    #[serde(default)]
    pub you: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserView {
    pub user_id: String,
    pub username: String,
    pub display_name: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub campus: Option<String>,
}

impl From<&User> for UserView {
    fn from(u: &User) -> Self {
        Self {
            user_id: u.user_id.to_string(),
            username: u.username.clone(),
            display_name: u.display_name.clone(),
            role: u.role,
            campus: u.campus.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub expires_at: DateTime<Utc>,
    pub user: UserView,
}

pub(crate) fn now() -> DateTime<Utc> {
    // Stored timestamps carry microseconds; keep in-memory values identical.
    let t = Utc::now();
    DateTime::from_timestamp_micros(t.timestamp_micros()).expect("current time is representable")
}

pub(crate) fn ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Micros, true)
}

pub(crate) fn parse_ts(s: &str) -> rusqlite::Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| {
            rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e))
        })
}

fn parse_col<T: std::str::FromStr<Err = CoreError>>(s: &str) -> rusqlite::Result<T> {
    s.parse().map_err(|e: CoreError| {
        rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e))
    })
}

pub(crate) struct CourseworkRow {
    pub cw: Coursework,
    pub group_size_target: usize,
    pub pseudonym_seed: u64,
    pub next_pseudonym: u64,
}

impl Platform {
    pub fn new(config: ServerConfig) -> anyhow::Result<Self> {
        config.validate().map_err(anyhow::Error::msg)?;
        let profiles = config.load_runner_profiles().map_err(anyhow::Error::msg)?;
        let storage = Storage::open(&config.storage_dir)?;
        Ok(Self {
            storage: Mutex::new(storage),
            config,
            profiles,
            queue: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn profile(&self, id: &str) -> Option<&RunnerProfile> {
        self.profiles.get(id)
    }

    pub fn profile_ids(&self) -> Vec<String> {
        self.profiles.keys().cloned().collect()
    }

    pub(crate) fn attach_queue(&self, tx: Sender<RunId>) {
        *self.queue.lock().unwrap() = Some(tx);
    }

    pub(crate) fn detach_queue(&self) {
        self.queue.lock().unwrap().take();
    }

    pub(crate) fn notify_queue(&self, run: RunId) {
        if let Some(tx) = self.queue.lock().unwrap().as_ref() {
            // A closed channel means shutdown; the run stays queued on disk.
            let _ = tx.send(run);
        }
    }

    fn db(&self) -> MutexGuard<'_, Storage> {
        self.storage.lock().unwrap_or_else(|p| p.into_inner())
    }

    // ---- users and sessions ----

    /// Creates a user; used by enrollment and by operator bootstrap.
    pub fn create_user(
        &self,
        username: &str,
        display_name: &str,
        role: Role,
        campus: Option<&str>,
        password: &str,
    ) -> ApiResult<User> {
        let username = username.trim();
        if username.is_empty() || display_name.trim().is_empty() {
            return Err(ApiError::bad_request(
                "username and display_name must be non-empty",
            ));
        }
        if password.len() < 8 {
            return Err(ApiError::bad_request(
                "passwords need at least 8 characters",
            ));
        }
        let hash = auth::hash_password(password);
        let db = self.db();
        if user_by_username(&db.conn, username)?.is_some() {
            return Err(ApiError::new(
                axum::http::StatusCode::CONFLICT,
                "user_exists",
                format!("user `{username}` already exists"),
            ));
        }
        insert_user(&db.conn, username, display_name.trim(), role, campus, &hash)
    }

    pub fn login(&self, username: &str, password: &str) -> ApiResult<Session> {
        let found = {
            let db = self.db();
            db.conn
                .query_row(
                    "SELECT user_id, password_hash FROM users WHERE username = ?1",
                    [username.trim()],
                    |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?)),
                )
                .optional()?
        };
        // Hash verification runs outside the lock; it is deliberately slow.
        let user_id = match found {
            Some((id, phc)) if auth::verify_password(password, &phc) => UserId(id),
            _ => {
                return Err(ApiError::new(
                    axum::http::StatusCode::UNAUTHORIZED,
                    "bad_credentials",
                    "unknown username or wrong password",
                ))
            }
        };
        let (token, hash) = auth::new_token();
        let expires_at =
            now() + chrono::Duration::from_std(self.config.session_ttl()).expect("ttl fits");
        let db = self.db();
        db.conn
            .execute("DELETE FROM sessions WHERE expires_at < ?1", [ts(now())])?;
        db.conn.execute(
            "INSERT INTO sessions (token_hash, user_id, expires_at) VALUES (?1, ?2, ?3)",
            params![hash, user_id.as_str(), ts(expires_at)],
        )?;
        let user = load_user(&db.conn, &user_id)?;
        Ok(Session {
            token,
            expires_at,
            user: UserView::from(&user),
        })
    }

    pub fn logout(&self, token: &str) -> ApiResult<()> {
        self.db().conn.execute(
            "DELETE FROM sessions WHERE token_hash = ?1",
            [auth::token_hash(token)],
        )?;
        Ok(())
    }

    pub fn authenticate(&self, token: &str) -> ApiResult<User> {
        let db = self.db();
        let row = db
            .conn
            .query_row(
                "SELECT user_id, expires_at FROM sessions WHERE token_hash = ?1",
                [auth::token_hash(token)],
                |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?)),
            )
            .optional()?;
        match row {
            Some((uid, exp)) if parse_ts(&exp)? > now() => load_user(&db.conn, &UserId(uid)),
            _ => Err(ApiError::unauthenticated()),
        }
    }

    pub fn storage_healthy(&self) -> bool {
        self.db().conn.query_row("SELECT 1", [], |_| Ok(())).is_ok()
    }
}

// ---- row helpers shared by the submodules ----

fn user_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<User> {
    Ok(User {
        user_id: UserId(r.get(0)?),
        username: r.get(1)?,
        display_name: r.get(2)?,
        role: parse_col(&r.get::<_, String>(3)?)?,
        campus: r.get(4)?,
    })
}

const USER_COLS: &str = "user_id, username, display_name, role, campus";

pub(crate) fn insert_user(
    conn: &Connection,
    username: &str,
    display_name: &str,
    role: Role,
    campus: Option<&str>,
    password_hash: &str,
) -> ApiResult<User> {
    let user = User {
        user_id: UserId::generate(),
        username: username.to_owned(),
        display_name: display_name.to_owned(),
        role,
        campus: campus
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::to_owned),
    };
    conn.execute(
        "INSERT INTO users (user_id, username, display_name, role, campus, password_hash) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
        params![
            user.user_id.as_str(),
            user.username,
            user.display_name,
            role.as_str(),
            user.campus,
            password_hash
        ],
    )?;
    Ok(user)
}

pub(crate) fn load_user(conn: &Connection, id: &UserId) -> ApiResult<User> {
    conn.query_row(
        &format!("SELECT {USER_COLS} FROM users WHERE user_id = ?1"),
        [id.as_str()],
        user_from_row,
    )
    .optional()?
    .ok_or_else(|| CoreError::UnknownUser(id.to_string()).into())
}

pub(crate) fn user_by_username(conn: &Connection, username: &str) -> ApiResult<Option<User>> {
    Ok(conn
        .query_row(
            &format!("SELECT {USER_COLS} FROM users WHERE username = ?1"),
            [username],
            user_from_row,
        )
        .optional()?)
}

pub(crate) fn load_coursework(conn: &Connection, id: &CourseworkId) -> ApiResult<CourseworkRow> {
    conn.query_row(
        "SELECT coursework_id, title, spec_path, spec_sha256, spec_size, stage, runner_profile_id, stage_deadlines,
                group_size_target, pseudonym_seed, next_pseudonym, created_by, created_at
         FROM courseworks WHERE coursework_id = ?1",
        [id.as_str()],
        |r| {
            let spec_path: Option<String> = r.get(2)?;
            let spec_document = match spec_path {
                Some(path) => Some(StoredFile {
                    path,
                    sha256: r.get(3)?,
                    size: r.get::<_, i64>(4)? as u64,
                }),
                None => None,
            };
            let stage: u8 = r.get(5)?;
            let deadlines: String = r.get(7)?;
            Ok(CourseworkRow {
                cw: Coursework {
                    coursework_id: CourseworkId(r.get(0)?),
                    title: r.get(1)?,
                    spec_document,
                    stage: Stage::from_number(stage).unwrap_or(Stage::Setup),
                    runner_profile_id: r.get(6)?,
                    stage_deadlines: serde_json::from_str(&deadlines).unwrap_or_default(),
                    created_by: UserId(r.get(11)?),
                    created_at: parse_ts(&r.get::<_, String>(12)?)?,
                },
                group_size_target: r.get::<_, i64>(8)? as usize,
                pseudonym_seed: r.get::<_, i64>(9)? as u64,
                next_pseudonym: r.get::<_, i64>(10)? as u64,
            })
        },
    )
    .optional()?
    .ok_or_else(|| ApiError::not_found(format!("coursework `{id}`")))
}

pub(crate) fn load_enrollment(
    conn: &Connection,
    cw: &CourseworkId,
    user: &UserId,
) -> ApiResult<Option<Enrollment>> {
    Ok(conn
        .query_row(
            "SELECT pseudonym, enrolled_at FROM enrollments WHERE coursework_id = ?1 AND user_id = ?2",
            [cw.as_str(), user.as_str()],
            |r| {
                Ok(Enrollment {
                    user_id: user.clone(),
                    coursework_id: cw.clone(),
                    pseudonym: r.get(0)?,
                    enrolled_at: parse_ts(&r.get::<_, String>(1)?)?,
                })
            },
        )
        .optional()?)
}

pub(crate) fn enrolled_students(
    conn: &Connection,
    cw: &CourseworkId,
) -> ApiResult<Vec<(User, String)>> {
    let mut stmt = conn.prepare(
        "SELECT u.user_id, u.username, u.display_name, u.role, u.campus, e.pseudonym
         FROM enrollments e JOIN users u ON u.user_id = e.user_id
         WHERE e.coursework_id = ?1 ORDER BY u.username",
    )?;
    let rows = stmt
        .query_map([cw.as_str()], |r| {
            Ok((user_from_row(r)?, r.get::<_, String>(5)?))
        })?
        .collect::<rusqlite::Result<Vec<_>>>()?;
    Ok(rows)
}

pub(crate) fn load_plan(
    conn: &Connection,
    cw: &CourseworkId,
    target: usize,
) -> ApiResult<GroupingPlan> {
    let mut stmt =
        conn.prepare("SELECT group_id, user_id FROM group_members WHERE coursework_id = ?1 ORDER BY group_id, user_id")?;
    let mut groups: BTreeMap<String, PeerGroup> = BTreeMap::new();
    for row in stmt.query_map([cw.as_str()], |r| {
        Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?))
    })? {
        let (gid, uid) = row?;
        groups
            .entry(gid.clone())
            .or_insert_with(|| PeerGroup {
                group_id: GroupId(gid),
                members: Default::default(),
            })
            .members
            .insert(UserId(uid));
    }
    let mut groups: Vec<PeerGroup> = groups.into_values().collect();
    // g2 before g10.
    groups.sort_by_key(|g| {
        let n: u64 = g
            .group_id
            .as_str()
            .trim_start_matches('g')
            .parse()
            .unwrap_or(u64::MAX);
        (n, g.group_id.to_string())
    });
    Ok(GroupingPlan {
        group_size_target: target,
        groups,
    })
}

pub(crate) fn store_plan(
    conn: &Connection,
    cw: &CourseworkId,
    plan: &GroupingPlan,
) -> ApiResult<()> {
    conn.execute(
        "DELETE FROM group_members WHERE coursework_id = ?1",
        [cw.as_str()],
    )?;
    let mut stmt = conn.prepare(
        "INSERT INTO group_members (coursework_id, group_id, user_id) VALUES (?1, ?2, ?3)",
    )?;
    for g in &plan.groups {
        for m in &g.members {
            stmt.execute([cw.as_str(), g.group_id.as_str(), m.as_str()])?;
        }
    }
    Ok(())
}

const SUBMISSION_COLS: &str =
    "submission_id, coursework_id, owner_id, kind, name, version, created_at";

fn submission_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<Submission> {
    Ok(Submission {
        submission_id: SubmissionId(r.get(0)?),
        coursework_id: CourseworkId(r.get(1)?),
        owner_id: UserId(r.get(2)?),
        kind: parse_col::<SubmissionKind>(&r.get::<_, String>(3)?)?,
        name: r.get(4)?,
        version: r.get::<_, i64>(5)? as u32,
        files: Vec::new(),
        created_at: parse_ts(&r.get::<_, String>(6)?)?,
    })
}

fn load_files(conn: &Connection, id: &SubmissionId) -> rusqlite::Result<Vec<StoredFile>> {
    let mut stmt = conn.prepare(
        "SELECT path, sha256, size FROM submission_files WHERE submission_id = ?1 ORDER BY seq",
    )?;
    let files = stmt
        .query_map([id.as_str()], |r| {
            Ok(StoredFile {
                path: r.get(0)?,
                sha256: r.get(1)?,
                size: r.get::<_, i64>(2)? as u64,
            })
        })?
        .collect();
    files
}

pub(crate) fn load_submission(conn: &Connection, id: &SubmissionId) -> ApiResult<Submission> {
    let mut sub = conn
        .query_row(
            &format!("SELECT {SUBMISSION_COLS} FROM submissions WHERE submission_id = ?1"),
            [id.as_str()],
            submission_from_row,
        )
        .optional()?
        .ok_or_else(|| CoreError::UnknownSubmission(id.to_string()))?;
    sub.files = load_files(conn, id)?;
    Ok(sub)
}

pub(crate) fn query_submissions(
    conn: &Connection,
    where_sql: &str,
    args: &[&str],
) -> ApiResult<Vec<Submission>> {
    let sql = format!(
        "SELECT {SUBMISSION_COLS} FROM submissions WHERE {where_sql} ORDER BY created_at, version"
    );
    let mut stmt = conn.prepare(&sql)?;
    let mut subs = stmt
        .query_map(rusqlite::params_from_iter(args), submission_from_row)?
        .collect::<rusqlite::Result<Vec<_>>>()?;
    for s in &mut subs {
        s.files = load_files(conn, &s.submission_id)?;
    }
    Ok(subs)
}

/// Appends an activity event. Timestamps never run backwards relative to
/// earlier events, so id order and time order always agree.
pub(crate) fn record_event(
    conn: &Connection,
    cw: &CourseworkId,
    actor: &UserId,
    action: Action,
    subject: &str,
    detail: &str,
) -> ApiResult<ActivityEvent> {
    let last: Option<String> = conn
        .query_row(
            "SELECT timestamp FROM events ORDER BY event_id DESC LIMIT 1",
            [],
            |r| r.get(0),
        )
        .optional()?;
    let mut at = now();
    if let Some(last) = last {
        at = at.max(parse_ts(&last)?);
    }
    conn.execute(
        "INSERT INTO events (coursework_id, actor_id, action, subject_id, detail, timestamp) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
        params![cw.as_str(), actor.as_str(), action.as_str(), subject, detail, ts(at)],
    )?;
    Ok(ActivityEvent {
        event_id: conn.last_insert_rowid(),
        coursework_id: cw.clone(),
        actor_id: actor.clone(),
        action,
        subject_id: subject.to_owned(),
        detail: detail.to_owned(),
        timestamp: at,
    })
}

/// The permission-engine view of `user` within a coursework.
pub(crate) fn actor_for(conn: &Connection, user: &User, cw: &CourseworkId) -> ApiResult<Actor> {
    let enrolled =
        user.role == Role::Student && load_enrollment(conn, cw, &user.user_id)?.is_some();
    Ok(Actor {
        user_id: user.user_id.clone(),
        role: user.role,
        enrolled,
    })
}

pub(crate) fn require(decision: Decision) -> ApiResult<()> {
    decision.into_result().map_err(ApiError::denied)
}

/// Teacher-only operations go through the permission engine too.
pub(crate) fn require_manage(actor: &Actor, stage: Stage) -> ApiResult<()> {
    let ctx = peertest_core::permissions::AccessContext::new(actor.clone(), stage);
    require(peertest_core::permissions::permitted(
        Capability::ManageCoursework,
        &ctx,
    ))
}

/// Renders `subject` for `viewer` inside coursework `cw`.
pub(crate) fn person(
    conn: &Connection,
    viewer: &User,
    cw: &CourseworkId,
    subject: &UserId,
) -> ApiResult<Person> {
    let user = load_user(conn, subject)?;
    let pseudonym = load_enrollment(conn, cw, subject)?.map(|e| e.pseudonym);
    let you = &viewer.user_id == subject;
    Ok(
        if viewer.role == Role::Teacher || you || user.role == Role::Teacher {
            Person {
                user_id: Some(user.user_id.to_string()),
                display_name: Some(user.display_name),
                pseudonym,
                role: user.role,
                you,
            }
        } else {
            Person {
                user_id: None,
                display_name: None,
                pseudonym: Some(pseudonym.unwrap_or_else(|| "former participant".into())),
                role: user.role,
                you,
            }
        },
    )
}

/// Resolves a student reference given as user id, username or pseudonym.
pub(crate) fn resolve_student(
    conn: &Connection,
    cw: &CourseworkId,
    label: &str,
) -> ApiResult<Option<UserId>> {
    let label = label.trim();
    Ok(conn
        .query_row(
            "SELECT u.user_id FROM enrollments e JOIN users u ON u.user_id = e.user_id
             WHERE e.coursework_id = ?1 AND (u.user_id = ?2 OR u.username = ?2 OR e.pseudonym = ?2)",
            [cw.as_str(), label],
            |r| r.get::<_, String>(0),
        )
        .optional()?
        .map(UserId))
}
