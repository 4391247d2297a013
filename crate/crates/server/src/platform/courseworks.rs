use std::collections::{BTreeMap, BTreeSet};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use chrono::{DateTime, Utc};
use peertest_core::grouping::{self, Candidate, GroupingPlan, DEFAULT_GROUP_SIZE};
use peertest_core::lifecycle::{self, SetupInventory};
use peertest_core::monitoring::Action;
use peertest_core::permissions::{
    permitted, AccessContext, Actor, Capability, Decision, Denial, DenyCode,
};
use peertest_core::pseudonym::PseudonymGenerator;
use peertest_core::{
    normalize_rel_path, CoreError, CourseworkId, Enrollment, GroupId, Role, Stage, StoredFile,
    SubmissionKind, User, UserId,
};
use peertest_harness::profile::{parse_profiles_with, RunnerProfile};
use rand::RngCore;
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use super::{
    actor_for, enrolled_students, insert_user, load_coursework, load_enrollment, load_plan,
    load_user, person, record_event, require_manage, resolve_student, store_plan, ts,
    user_by_username, CourseworkRow, Person, Platform,
};
use crate::auth;
use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    pub path: String,
    pub content_base64: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewCoursework {
    pub title: String,
    /// A profile configured on the server.
    #[serde(default)]
    pub runner_profile_id: Option<String>,
    /// A profile definition in the profile-file TOML format, stored with the
    /// coursework. Takes precedence over `runner_profile_id`.
    #[serde(default)]
    pub runner_profile: Option<String>,
    #[serde(default)]
    pub group_size_target: Option<usize>,
    #[serde(default)]
    pub stage_deadlines: BTreeMap<u8, DateTime<Utc>>,
    #[serde(default)]
    pub spec: Option<SpecDocument>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CourseworkPatch {
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub runner_profile_id: Option<String>,
    #[serde(default)]
    pub runner_profile: Option<String>,
    #[serde(default)]
    pub group_size_target: Option<usize>,
    #[serde(default)]
    pub stage_deadlines: Option<BTreeMap<u8, DateTime<Utc>>>,
    #[serde(default)]
    pub spec: Option<SpecDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CourseworkView {
    pub coursework_id: String,
    pub title: String,
    pub stage: u8,
    pub stage_name: String,
    pub runner_profile_id: String,
    pub language_label: String,
    pub spec_document: Option<StoredFile>,
    pub stage_deadlines: BTreeMap<u8, DateTime<Utc>>,
    pub group_size_target: usize,
    pub created_at: DateTime<Utc>,
    /// Stage-level capabilities of the viewer, by name.
    pub capabilities: BTreeMap<String, bool>,
    pub enrolled: bool,
    /// The viewer's own pseudonym, for students.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudonym: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub my_group: Option<GroupView>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrollRequest {
    /// Existing user, by id or username.
    #[serde(default)]
    pub user: Option<String>,
    /// Creates the student when no user with this username exists.
    #[serde(default)]
    pub username: Option<String>,
    #[serde(default)]
    pub display_name: Option<String>,
    #[serde(default)]
    pub campus: Option<String>,
    #[serde(default)]
    pub password: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnrollResult {
    pub user_id: String,
    pub username: String,
    pub pseudonym: String,
    pub enrolled_at: DateTime<Utc>,
    pub already_enrolled: bool,
    pub created_user: bool,
    /// Set only when the user was created without a supplied password.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_password: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum GroupRequest {
    /// Seeded random grouping of every enrolled student.
    Form {
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        group_size: Option<usize>,
    },
    /// Moves one student into an existing group.
    Amend { student: String, group: String },
    /// Replaces the plan; members are user ids, usernames or pseudonyms.
    Set { groups: Vec<Vec<String>> },
    /// Replaces the plan from the one-group-per-line table format.
    Import { table: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupView {
    pub group_id: String,
    pub members: Vec<Person>,
    pub undersized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupingView {
    pub group_size_target: usize,
    pub groups: Vec<GroupView>,
    pub undersized: Vec<String>,
    /// Enrolled students not in any group.
    pub ungrouped: Vec<Person>,
    /// Teacher-only table, one group per line, labelled by pseudonym.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
}

fn decode_spec(spec: &SpecDocument, limit: u64) -> ApiResult<(String, Vec<u8>)> {
    let path = normalize_rel_path(&spec.path)?;
    let bytes = STANDARD
        .decode(spec.content_base64.trim())
        .map_err(|e| ApiError::bad_request(format!("spec.content_base64: {e}")))?;
    if bytes.is_empty() {
        return Err(CoreError::EmptyUpload.into());
    }
    if bytes.len() as u64 > limit {
        return Err(CoreError::TooLarge {
            size: bytes.len() as u64,
            limit,
        }
        .into());
    }
    Ok((path, bytes))
}

pub(crate) fn not_enrolled(stage: Stage) -> ApiError {
    ApiError::denied(Denial {
        code: DenyCode::NotEnrolled,
        capability: Capability::ViewPeerSource,
        stage,
        message: "you are not enrolled in this coursework".into(),
    })
}

/// Grouping writes are a setup activity; once peer-testing starts the
/// groups are fixed.
fn check_grouping_stage(stage: Stage) -> ApiResult<()> {
    if stage >= Stage::PeerTesting {
        return Err(ApiError::denied(Denial {
            code: DenyCode::StageForbids,
            capability: Capability::ManageCoursework,
            stage,
            message: format!(
                "groups can only be changed before peer-testing; the coursework is in {stage}"
            ),
        }));
    }
    Ok(())
}

impl Platform {
    fn resolve_profile(
        &self,
        id: Option<&str>,
        inline: Option<&str>,
    ) -> ApiResult<(String, Option<RunnerProfile>)> {
        if let Some(text) = inline {
            let mut profiles = parse_profiles_with(text, self.config().default_limits)
                .map_err(|e| ApiError::bad_request(format!("runner_profile: {e}")))?;
            if profiles.len() != 1 {
                return Err(ApiError::bad_request(
                    "runner_profile must define exactly one profile",
                ));
            }
            let p = profiles.remove(0);
            return Ok((p.profile_id.clone(), Some(p)));
        }
        let id = id.unwrap_or(peertest_harness::profile::LINE_SCRIPT_PROFILE_ID);
        if self.profile(id).is_none() {
            return Err(ApiError::bad_request(format!(
                "unknown runner profile `{id}`; configured profiles: {}",
                self.profile_ids().join(", ")
            )));
        }
        Ok((id.to_owned(), None))
    }

    /// The profile a coursework's runs execute under.
    pub(crate) fn coursework_profile(
        &self,
        conn: &Connection,
        cw: &CourseworkRow,
    ) -> ApiResult<RunnerProfile> {
        let inline: Option<String> = conn.query_row(
            "SELECT runner_profile FROM courseworks WHERE coursework_id = ?1",
            [cw.cw.coursework_id.as_str()],
            |r| r.get(0),
        )?;
        match inline {
            Some(json) => serde_json::from_str(&json).map_err(ApiError::internal),
            None => self
                .profile(&cw.cw.runner_profile_id)
                .cloned()
                .ok_or_else(|| {
                    ApiError::internal(format!(
                        "runner profile `{}` is no longer configured",
                        cw.cw.runner_profile_id
                    ))
                }),
        }
    }

    pub fn create_coursework(&self, user: &User, req: NewCoursework) -> ApiResult<CourseworkView> {
        if user.role != Role::Teacher {
            return Err(CoreError::NotTeacher.into());
        }
        let title = req.title.trim();
        if title.is_empty() {
            return Err(ApiError::bad_request("title must be non-empty"));
        }
        let target = req.group_size_target.unwrap_or(DEFAULT_GROUP_SIZE);
        if target < 2 {
            return Err(ApiError::bad_request(
                "group_size_target must be at least 2",
            ));
        }
        check_deadlines(&req.stage_deadlines)?;
        let (profile_id, inline) = self.resolve_profile(
            req.runner_profile_id.as_deref(),
            req.runner_profile.as_deref(),
        )?;
        let spec = req
            .spec
            .as_ref()
            .map(|s| decode_spec(s, self.config().upload_limit_bytes))
            .transpose()?;

        let mut guard = self.db();
        let db = &mut *guard;
        let spec_file = match spec {
            Some((path, bytes)) => Some(StoredFile {
                path,
                sha256: db.blobs.put(&bytes)?,
                size: bytes.len() as u64,
            }),
            None => None,
        };
        let id = CourseworkId::generate();
        let tx = db.conn.transaction()?;
        tx.execute(
            "INSERT INTO courseworks (coursework_id, title, spec_path, spec_sha256, spec_size, stage, runner_profile_id,
                runner_profile, stage_deadlines, group_size_target, pseudonym_seed, next_pseudonym, created_by, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, 0, ?6, ?7, ?8, ?9, ?10, 0, ?11, ?12)",
            params![
                id.as_str(),
                title,
                spec_file.as_ref().map(|f| f.path.clone()),
                spec_file.as_ref().map(|f| f.sha256.clone()),
                spec_file.as_ref().map(|f| f.size as i64),
                profile_id,
                inline.map(|p| serde_json::to_string(&p).expect("profiles serialize")),
                serde_json::to_string(&req.stage_deadlines).expect("deadlines serialize"),
                target as i64,
                // SQLite integers are signed; keep the seed in range.
                (rand::thread_rng().next_u64() >> 1) as i64,
                user.user_id.as_str(),
                ts(super::now()),
            ],
        )?;
        record_event(
            &tx,
            &id,
            &user.user_id,
            Action::CourseworkCreated,
            id.as_str(),
            title,
        )?;
        tx.commit()?;
        self.view_coursework(&db.conn, user, &id)
    }

    pub fn update_coursework(
        &self,
        user: &User,
        id: &CourseworkId,
        patch: CourseworkPatch,
    ) -> ApiResult<CourseworkView> {
        let profile = match (&patch.runner_profile_id, &patch.runner_profile) {
            (None, None) => None,
            (id, inline) => Some(self.resolve_profile(id.as_deref(), inline.as_deref())?),
        };
        let spec = patch
            .spec
            .as_ref()
            .map(|s| decode_spec(s, self.config().upload_limit_bytes))
            .transpose()?;
        if let Some(d) = &patch.stage_deadlines {
            check_deadlines(d)?;
        }
        if patch.group_size_target.is_some_and(|t| t < 2) {
            return Err(ApiError::bad_request(
                "group_size_target must be at least 2",
            ));
        }
        let mut guard = self.db();
        let db = &mut *guard;
        let row = load_coursework(&db.conn, id)?;
        let actor = actor_for(&db.conn, user, id)?;
        require_manage(&actor, row.cw.stage)?;

        let mut changed = Vec::new();
        let tx = db.conn.transaction()?;
        if let Some(title) = patch.title.as_deref().map(str::trim) {
            if title.is_empty() {
                return Err(ApiError::bad_request("title must be non-empty"));
            }
            if title != row.cw.title {
                tx.execute(
                    "UPDATE courseworks SET title = ?2 WHERE coursework_id = ?1",
                    params![id.as_str(), title],
                )?;
                changed.push("title");
            }
        }
        if let Some((profile_id, inline)) = profile {
            let inline = inline.map(|p| serde_json::to_string(&p).expect("profiles serialize"));
            let current: (String, Option<String>) = tx.query_row(
                "SELECT runner_profile_id, runner_profile FROM courseworks WHERE coursework_id = ?1",
                [id.as_str()],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )?;
            if current != (profile_id.clone(), inline.clone()) {
                tx.execute(
                    "UPDATE courseworks SET runner_profile_id = ?2, runner_profile = ?3 WHERE coursework_id = ?1",
                    params![id.as_str(), profile_id, inline],
                )?;
                changed.push("runner_profile");
            }
        }
        if let Some(target) = patch.group_size_target {
            if target != row.group_size_target {
                tx.execute(
                    "UPDATE courseworks SET group_size_target = ?2 WHERE coursework_id = ?1",
                    params![id.as_str(), target as i64],
                )?;
                changed.push("group_size_target");
            }
        }
        if let Some(deadlines) = &patch.stage_deadlines {
            if deadlines != &row.cw.stage_deadlines {
                tx.execute(
                    "UPDATE courseworks SET stage_deadlines = ?2 WHERE coursework_id = ?1",
                    params![
                        id.as_str(),
                        serde_json::to_string(deadlines).expect("deadlines serialize")
                    ],
                )?;
                changed.push("stage_deadlines");
            }
        }
        if let Some((path, bytes)) = spec {
            let sha = db.blobs.put(&bytes)?;
            let same = row
                .cw
                .spec_document
                .as_ref()
                .is_some_and(|f| f.path == path && f.sha256 == sha);
            if !same {
                tx.execute(
                    "UPDATE courseworks SET spec_path = ?2, spec_sha256 = ?3, spec_size = ?4 WHERE coursework_id = ?1",
                    params![id.as_str(), path, sha, bytes.len() as i64],
                )?;
                changed.push("spec");
            }
        }
        if !changed.is_empty() {
            record_event(
                &tx,
                id,
                &user.user_id,
                Action::CourseworkUpdated,
                id.as_str(),
                &changed.join(","),
            )?;
        }
        tx.commit()?;
        self.view_coursework(&db.conn, user, id)
    }

    /// Courseworks the user teaches (every coursework, for teachers) or is
    /// enrolled in.
    pub fn list_courseworks(&self, user: &User) -> ApiResult<Vec<CourseworkView>> {
        let db = self.db();
        let ids: Vec<String> = if user.role == Role::Teacher {
            let mut stmt = db
                .conn
                .prepare("SELECT coursework_id FROM courseworks ORDER BY created_at")?;
            let ids = stmt
                .query_map([], |r| r.get(0))?
                .collect::<rusqlite::Result<_>>()?;
            ids
        } else {
            let mut stmt = db.conn.prepare(
                "SELECT c.coursework_id FROM courseworks c JOIN enrollments e ON e.coursework_id = c.coursework_id
                 WHERE e.user_id = ?1 ORDER BY c.created_at",
            )?;
            let ids = stmt
                .query_map([user.user_id.as_str()], |r| r.get(0))?
                .collect::<rusqlite::Result<_>>()?;
            ids
        };
        ids.into_iter()
            .map(|id| self.view_coursework(&db.conn, user, &CourseworkId(id)))
            .collect()
    }

    pub fn get_coursework(&self, user: &User, id: &CourseworkId) -> ApiResult<CourseworkView> {
        let db = self.db();
        self.view_coursework(&db.conn, user, id)
    }

    /// Looks a coursework up by exact title, for idempotent setup tooling.
    pub fn find_coursework_by_title(
        &self,
        user: &User,
        title: &str,
    ) -> ApiResult<Option<CourseworkView>> {
        if user.role != Role::Teacher {
            return Err(CoreError::NotTeacher.into());
        }
        let db = self.db();
        let id: Option<String> = db
            .conn
            .query_row(
                "SELECT coursework_id FROM courseworks WHERE title = ?1 ORDER BY created_at LIMIT 1",
                [title.trim()],
                |r| r.get(0),
            )
            .optional()?;
        id.map(|id| self.view_coursework(&db.conn, user, &CourseworkId(id)))
            .transpose()
    }

    fn view_coursework(
        &self,
        conn: &Connection,
        user: &User,
        id: &CourseworkId,
    ) -> ApiResult<CourseworkView> {
        let row = load_coursework(conn, id)?;
        let actor = actor_for(conn, user, id)?;
        if user.role == Role::Student && !actor.enrolled {
            return Err(not_enrolled(row.cw.stage));
        }
        let profile = self.coursework_profile(conn, &row)?;
        let pseudonym = if user.role == Role::Student {
            load_enrollment(conn, id, &user.user_id)?.map(|e| e.pseudonym)
        } else {
            None
        };
        let my_group = if user.role == Role::Student {
            let plan = load_plan(conn, id, row.group_size_target)?;
            plan.group_of(&user.user_id)
                .map(|g| group_view(conn, user, id, &g.group_id, &g.members))
                .transpose()?
        } else {
            None
        };
        Ok(CourseworkView {
            coursework_id: id.to_string(),
            title: row.cw.title.clone(),
            stage: row.cw.stage.number(),
            stage_name: row.cw.stage.name().to_owned(),
            runner_profile_id: profile.profile_id.clone(),
            language_label: profile.language_label.clone(),
            spec_document: row.cw.spec_document.clone(),
            stage_deadlines: row.cw.stage_deadlines.clone(),
            group_size_target: row.group_size_target,
            created_at: row.cw.created_at,
            capabilities: stage_capabilities(&actor, row.cw.stage),
            enrolled: actor.enrolled,
            pseudonym,
            my_group,
        })
    }

    /// The specification document; readable by teachers and enrolled students.
    pub fn spec_document(
        &self,
        user: &User,
        id: &CourseworkId,
    ) -> ApiResult<(StoredFile, Vec<u8>)> {
        let db = self.db();
        let row = load_coursework(&db.conn, id)?;
        let actor = actor_for(&db.conn, user, id)?;
        if user.role == Role::Student && !actor.enrolled {
            return Err(not_enrolled(row.cw.stage));
        }
        let file = row
            .cw
            .spec_document
            .ok_or_else(|| ApiError::not_found("specification document"))?;
        let bytes = db.blobs.get(&file.sha256)?;
        Ok((file, bytes))
    }

    pub fn advance(&self, user: &User, id: &CourseworkId) -> ApiResult<CourseworkView> {
        let mut guard = self.db();
        let db = &mut *guard;
        let tx = db.conn.transaction()?;
        let row = load_coursework(&tx, id)?;
        let count = |kind: SubmissionKind| -> ApiResult<usize> {
            Ok(tx.query_row(
                "SELECT COUNT(*) FROM submissions WHERE coursework_id = ?1 AND kind = ?2",
                [id.as_str(), kind.as_str()],
                |r| r.get::<_, i64>(0),
            )? as usize)
        };
        let inventory = SetupInventory {
            oracle_solutions: count(SubmissionKind::OracleSolution)?,
            signature_tests: count(SubmissionKind::SignatureTest)?,
        };
        let next = lifecycle::advance(row.cw.stage, user.role, inventory)
            .map_err(|e| ApiError::from(e).at_stage(row.cw.stage))?;
        // Compare-and-set so two concurrent advances cannot skip a stage.
        let n = tx.execute(
            "UPDATE courseworks SET stage = ?3 WHERE coursework_id = ?1 AND stage = ?2",
            params![id.as_str(), row.cw.stage.number(), next.number()],
        )?;
        if n != 1 {
            return Err(ApiError::new(
                axum::http::StatusCode::CONFLICT,
                "stage_changed",
                "the stage changed concurrently; reload and retry",
            ));
        }
        record_event(
            &tx,
            id,
            &user.user_id,
            Action::StageAdvanced,
            id.as_str(),
            &next.number().to_string(),
        )?;
        tx.commit()?;
        self.view_coursework(&db.conn, user, id)
    }

    pub fn enroll(
        &self,
        user: &User,
        id: &CourseworkId,
        req: EnrollRequest,
    ) -> ApiResult<EnrollResult> {
        if user.role != Role::Teacher {
            return Err(CoreError::NotTeacher.into());
        }
        // Hash outside the lock; only needed when a user gets created.
        let supplied_password = req.password.clone();
        if supplied_password.as_ref().is_some_and(|p| p.len() < 8) {
            return Err(ApiError::bad_request(
                "passwords need at least 8 characters",
            ));
        }
        let needs_creation = {
            let db = self.db();
            self.lookup_enrollee(&db.conn, &req)?.is_none()
        };
        let prepared = if needs_creation {
            let password = supplied_password
                .clone()
                .unwrap_or_else(auth::generate_password);
            Some((auth::hash_password(&password), password))
        } else {
            None
        };

        let mut guard = self.db();
        let db = &mut *guard;
        let tx = db.conn.transaction()?;
        let row = load_coursework(&tx, id)?;
        let actor = actor_for(&tx, user, id)?;
        require_manage(&actor, row.cw.stage)?;
        let (student, created, initial_password) = match self.lookup_enrollee(&tx, &req)? {
            Some(u) => (u, false, None),
            None => {
                let username = req.username.as_deref().map(str::trim).unwrap_or_default();
                let display_name = req
                    .display_name
                    .as_deref()
                    .map(str::trim)
                    .unwrap_or_default();
                if username.is_empty() || display_name.is_empty() {
                    return Err(ApiError::bad_request(
                        "unknown user; give username and display_name to create the student",
                    ));
                }
                let (hash, password) = match prepared {
                    Some(p) => p,
                    // Created concurrently between the two lookups.
                    None => {
                        let p = supplied_password
                            .clone()
                            .unwrap_or_else(auth::generate_password);
                        (auth::hash_password(&p), p)
                    }
                };
                let u = insert_user(
                    &tx,
                    username,
                    display_name,
                    Role::Student,
                    req.campus.as_deref(),
                    &hash,
                )?;
                let shown = supplied_password.is_none().then_some(password);
                (u, true, shown)
            }
        };
        lifecycle::check_enroll(row.cw.stage, student.role)
            .map_err(|e| ApiError::from(e).at_stage(row.cw.stage))?;
        if let Some(existing) = load_enrollment(&tx, id, &student.user_id)? {
            return Ok(enroll_result(&student, existing, true, false, None));
        }
        let generator = PseudonymGenerator::new(row.pseudonym_seed);
        let mut slot = row.next_pseudonym;
        let (used, pseudonym) = loop {
            let (used, candidate) = generator.assign(slot, &student.display_name);
            let taken: bool = tx.query_row(
                "SELECT EXISTS(SELECT 1 FROM enrollments WHERE coursework_id = ?1 AND pseudonym = ?2)",
                [id.as_str(), candidate.as_str()],
                |r| r.get(0),
            )?;
            if !taken {
                break (used, candidate);
            }
            slot = used + 1;
        };
        let enrolled_at = super::now();
        tx.execute(
            "INSERT INTO enrollments (coursework_id, user_id, pseudonym, enrolled_at) VALUES (?1, ?2, ?3, ?4)",
            params![id.as_str(), student.user_id.as_str(), pseudonym, ts(enrolled_at)],
        )?;
        tx.execute(
            "UPDATE courseworks SET next_pseudonym = ?2 WHERE coursework_id = ?1",
            params![id.as_str(), (used + 1) as i64],
        )?;
        record_event(
            &tx,
            id,
            &user.user_id,
            Action::Enrolled,
            student.user_id.as_str(),
            &pseudonym,
        )?;
        tx.commit()?;
        let enrollment = Enrollment {
            user_id: student.user_id.clone(),
            coursework_id: id.clone(),
            pseudonym,
            enrolled_at,
        };
        Ok(enroll_result(
            &student,
            enrollment,
            false,
            created,
            initial_password,
        ))
    }

    fn lookup_enrollee(&self, conn: &Connection, req: &EnrollRequest) -> ApiResult<Option<User>> {
        if let Some(r) = req.user.as_deref().map(str::trim) {
            if let Some(u) = user_by_username(conn, r)? {
                return Ok(Some(u));
            }
            return match load_user(conn, &UserId(r.to_owned())) {
                Ok(u) => Ok(Some(u)),
                Err(_) => Err(CoreError::UnknownUser(r.to_owned()).into()),
            };
        }
        match req.username.as_deref().map(str::trim) {
            Some(name) if !name.is_empty() => user_by_username(conn, name),
            _ => Err(ApiError::bad_request("give `user` or `username`")),
        }
    }

    pub fn get_groups(&self, user: &User, id: &CourseworkId) -> ApiResult<GroupingView> {
        let db = self.db();
        let row = load_coursework(&db.conn, id)?;
        let actor = actor_for(&db.conn, user, id)?;
        if user.role == Role::Student && !actor.enrolled {
            return Err(not_enrolled(row.cw.stage));
        }
        let plan = load_plan(&db.conn, id, row.group_size_target)?;
        grouping_view(&db.conn, user, id, &plan)
    }

    pub fn set_groups(
        &self,
        user: &User,
        id: &CourseworkId,
        req: GroupRequest,
    ) -> ApiResult<GroupingView> {
        let mut guard = self.db();
        let db = &mut *guard;
        let tx = db.conn.transaction()?;
        let row = load_coursework(&tx, id)?;
        let actor = actor_for(&tx, user, id)?;
        require_manage(&actor, row.cw.stage)?;
        check_grouping_stage(row.cw.stage)?;
        let students = enrolled_students(&tx, id)?;
        let enrolled: BTreeSet<UserId> = students.iter().map(|(u, _)| u.user_id.clone()).collect();
        let current = load_plan(&tx, id, row.group_size_target)?;
        let resolve = |label: &str| resolve_student(&tx, id, label).ok().flatten();

        let (plan, subject, detail) = match req {
            GroupRequest::Form { seed, group_size } => {
                let size = group_size.unwrap_or(row.group_size_target);
                let seed = seed.unwrap_or_else(|| rand::thread_rng().next_u64());
                let candidates: Vec<Candidate> = students
                    .iter()
                    .map(|(u, _)| Candidate::new(u.user_id.clone(), u.campus.as_deref()))
                    .collect();
                let plan = grouping::form_groups(&candidates, size, seed)?;
                let detail = format!("form seed={seed} size={size} groups={}", plan.groups.len());
                (plan, id.to_string(), detail)
            }
            GroupRequest::Amend { student, group } => {
                let sid =
                    resolve(&student).ok_or_else(|| CoreError::UnknownStudent(student.clone()))?;
                let from = current
                    .group_of(&sid)
                    .map(|g| g.group_id.to_string())
                    .unwrap_or_else(|| "-".into());
                let amendment =
                    grouping::amend_group(&current, &sid, &GroupId(group.clone()), &enrolled)?;
                if !amendment.changed {
                    drop(tx);
                    return grouping_view(&db.conn, user, id, &amendment.plan);
                }
                (
                    amendment.plan,
                    sid.to_string(),
                    format!("{from} -> {group}"),
                )
            }
            GroupRequest::Set { groups } => {
                let table: String = groups.iter().map(|g| g.join(", ") + "\n").collect();
                let plan = GroupingPlan::from_table(&table, row.group_size_target, resolve)?;
                let detail = format!("set groups={}", plan.groups.len());
                (plan, id.to_string(), detail)
            }
            GroupRequest::Import { table } => {
                let plan = GroupingPlan::from_table(&table, row.group_size_target, resolve)?;
                let detail = format!("import groups={}", plan.groups.len());
                (plan, id.to_string(), detail)
            }
        };
        if plan.groups.iter().any(|g| g.members.is_empty()) {
            return Err(ApiError::bad_request("groups must not be empty"));
        }
        if plan == current {
            drop(tx);
            return grouping_view(&db.conn, user, id, &plan);
        }
        store_plan(&tx, id, &plan)?;
        record_event(
            &tx,
            id,
            &user.user_id,
            Action::GroupAmended,
            &subject,
            &detail,
        )?;
        tx.commit()?;
        grouping_view(&db.conn, user, id, &plan)
    }
}

fn check_deadlines(d: &BTreeMap<u8, DateTime<Utc>>) -> ApiResult<()> {
    match d.keys().find(|s| Stage::from_number(**s).is_none()) {
        Some(bad) => Err(ApiError::bad_request(format!(
            "stage_deadlines: no stage {bad}"
        ))),
        None => Ok(()),
    }
}

fn enroll_result(
    user: &User,
    e: Enrollment,
    already_enrolled: bool,
    created_user: bool,
    initial_password: Option<String>,
) -> EnrollResult {
    EnrollResult {
        user_id: user.user_id.to_string(),
        username: user.username.clone(),
        pseudonym: e.pseudonym,
        enrolled_at: e.enrolled_at,
        already_enrolled,
        created_user,
        initial_password,
    }
}

/// What the actor could do at this stage, given a suitable target: a peer
/// in the same group, a discussion they take part in.
pub(crate) fn stage_capabilities(actor: &Actor, stage: Stage) -> BTreeMap<String, bool> {
    Capability::ALL
        .into_iter()
        .map(|cap| {
            let mut ctx = AccessContext::new(actor.clone(), stage).with_participant(true);
            match cap {
                Capability::RunPeerTest | Capability::ViewPeerSource => {
                    ctx = ctx.with_target(UserId("peer".into()), SubmissionKind::Solution, true);
                }
                Capability::UploadSolution => ctx = ctx.with_kind(SubmissionKind::Solution),
                Capability::UploadTest => ctx = ctx.with_kind(SubmissionKind::TestSuite),
                Capability::SubmitReport => ctx = ctx.with_kind(SubmissionKind::ReflectiveReport),
                _ => {}
            }
            (
                cap.as_str().to_owned(),
                matches!(permitted(cap, &ctx), Decision::Allow),
            )
        })
        .collect()
}

fn group_view(
    conn: &Connection,
    viewer: &User,
    cw: &CourseworkId,
    group: &GroupId,
    members: &BTreeSet<UserId>,
) -> ApiResult<GroupView> {
    let mut people = members
        .iter()
        .map(|m| person(conn, viewer, cw, m))
        .collect::<ApiResult<Vec<_>>>()?;
    people.sort_by(|a, b| b.you.cmp(&a.you).then(a.pseudonym.cmp(&b.pseudonym)));
    Ok(GroupView {
        group_id: group.to_string(),
        members: people,
        undersized: members.len() < 2,
    })
}

fn grouping_view(
    conn: &Connection,
    viewer: &User,
    cw: &CourseworkId,
    plan: &GroupingPlan,
) -> ApiResult<GroupingView> {
    if viewer.role == Role::Student {
        // Students only learn about their own group.
        let groups = plan
            .group_of(&viewer.user_id)
            .map(|g| group_view(conn, viewer, cw, &g.group_id, &g.members))
            .transpose()?
            .into_iter()
            .collect();
        return Ok(GroupingView {
            group_size_target: plan.group_size_target,
            groups,
            undersized: Vec::new(),
            ungrouped: Vec::new(),
            table: None,
        });
    }
    let students = enrolled_students(conn, cw)?;
    let pseudonyms: BTreeMap<UserId, String> = students
        .iter()
        .map(|(u, p)| (u.user_id.clone(), p.clone()))
        .collect();
    let grouped = plan.members();
    let ungrouped = students
        .iter()
        .filter(|(u, _)| !grouped.contains(&u.user_id))
        .map(|(u, _)| person(conn, viewer, cw, &u.user_id))
        .collect::<ApiResult<Vec<_>>>()?;
    Ok(GroupingView {
        group_size_target: plan.group_size_target,
        groups: plan
            .groups
            .iter()
            .map(|g| group_view(conn, viewer, cw, &g.group_id, &g.members))
            .collect::<ApiResult<_>>()?,
        undersized: plan
            .undersized()
            .into_iter()
            .map(|g| g.to_string())
            .collect(),
        ungrouped,
        table: Some(plan.to_table(|u| pseudonyms.get(u).cloned().unwrap_or_else(|| u.to_string()))),
    })
}
