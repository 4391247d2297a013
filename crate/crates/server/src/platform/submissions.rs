use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use chrono::{DateTime, Utc};
use peertest_core::lifecycle;
use peertest_core::monitoring::Action;
use peertest_core::permissions::{
    permitted, visible_fields, AccessContext, Actor, Capability, Decision, View,
};
use peertest_core::{
    CourseworkId, Role, Stage, StoredFile, Submission, SubmissionId, SubmissionKind, User,
};
use rusqlite::{params, Connection};
use serde::{Deserialize, Serialize};

use super::{
    actor_for, load_coursework, load_plan, load_submission, load_user, person, query_submissions,
    record_event, ts, Person, Platform,
};
use crate::error::{ApiError, ApiResult};

/// An upload as received by the API.
#[derive(Debug, Clone)]
pub struct Upload {
    pub kind: SubmissionKind,
    /// Logical name; defaults to the kind, so each student has one
    /// versioned solution and one versioned test suite.
    pub name: Option<String>,
    pub files: Vec<(String, Vec<u8>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionFilter {
    /// The caller's own submissions.
    Mine,
    /// Other students' submissions the caller may see.
    Peers,
    /// Teacher-provided material.
    Provided,
    /// Everything the caller may see.
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileView {
    pub path: String,
    pub size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    /// `utf8` or `base64`; absent when only metadata is visible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoding: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmissionView {
    pub submission_id: String,
    pub coursework_id: String,
    pub owner: Person,
    pub kind: SubmissionKind,
    pub name: String,
    pub version: u32,
    pub latest: bool,
    pub created_at: DateTime<Utc>,
    pub view: View,
    pub total_size: u64,
    pub files: Vec<FileView>,
}

/// Visibility of `sub` to `actor`, taking groups into account.
pub(crate) fn view_of(
    conn: &Connection,
    actor: &Actor,
    stage: Stage,
    sub: &Submission,
) -> ApiResult<View> {
    let owner = load_user(conn, &sub.owner_id)?;
    let same_group = if actor.role == Role::Student && owner.role == Role::Student {
        let target = load_coursework(conn, &sub.coursework_id)?.group_size_target;
        load_plan(conn, &sub.coursework_id, target)?.same_group(&actor.user_id, &sub.owner_id)
    } else {
        false
    };
    Ok(visible_fields(
        actor,
        &sub.owner_id,
        owner.role,
        sub.kind,
        stage,
        same_group,
    ))
}

fn is_latest(conn: &Connection, sub: &Submission) -> ApiResult<bool> {
    let max: u32 = conn.query_row(
        "SELECT MAX(version) FROM submissions WHERE coursework_id = ?1 AND owner_id = ?2 AND kind = ?3 AND name = ?4",
        params![sub.coursework_id.as_str(), sub.owner_id.as_str(), sub.kind.as_str(), sub.name],
        |r| r.get(0),
    )?;
    Ok(max == sub.version)
}

type ReadContents<'a> = dyn Fn(&StoredFile) -> ApiResult<Vec<u8>> + 'a;

/// Renders a submission; file contents only when `with_content` and the
/// view is full source.
pub(crate) fn submission_view(
    conn: &Connection,
    viewer: &User,
    view: View,
    sub: &Submission,
    contents: Option<&ReadContents>,
) -> ApiResult<SubmissionView> {
    let files = match view {
        View::Hidden => Vec::new(),
        View::MetadataOnly => sub
            .files
            .iter()
            .map(|f| FileView {
                path: f.path.clone(),
                size: f.size,
                sha256: None,
                encoding: None,
                content: None,
            })
            .collect(),
        View::FullSource => sub
            .files
            .iter()
            .map(|f| {
                let (encoding, content) = match contents {
                    Some(read) => {
                        let bytes = read(f)?;
                        match String::from_utf8(bytes) {
                            Ok(text) => (Some("utf8".to_owned()), Some(text)),
                            Err(e) => (
                                Some("base64".to_owned()),
                                Some(STANDARD.encode(e.into_bytes())),
                            ),
                        }
                    }
                    None => (None, None),
                };
                Ok(FileView {
                    path: f.path.clone(),
                    size: f.size,
                    sha256: Some(f.sha256.clone()),
                    encoding,
                    content,
                })
            })
            .collect::<ApiResult<_>>()?,
    };
    Ok(SubmissionView {
        submission_id: sub.submission_id.to_string(),
        coursework_id: sub.coursework_id.to_string(),
        owner: person(conn, viewer, &sub.coursework_id, &sub.owner_id)?,
        kind: sub.kind,
        name: sub.name.clone(),
        version: sub.version,
        latest: is_latest(conn, sub)?,
        created_at: sub.created_at,
        view,
        total_size: if view == View::Hidden {
            0
        } else {
            sub.total_size()
        },
        files,
    })
}

fn hidden_denial(actor: &Actor, stage: Stage, sub: &Submission, same_group: bool) -> ApiError {
    let ctx = AccessContext::new(actor.clone(), stage).with_target(
        sub.owner_id.clone(),
        sub.kind,
        same_group,
    );
    match permitted(Capability::ViewPeerSource, &ctx) {
        Decision::Deny(d) => ApiError::denied(d),
        Decision::Allow => ApiError::new(
            axum::http::StatusCode::FORBIDDEN,
            "permission_denied",
            format!(
                "{} submissions of other students are not shown to students",
                sub.kind
            ),
        )
        .at_stage(stage)
        .for_capability(Capability::ViewPeerSource),
    }
}

impl Platform {
    pub fn submit(
        &self,
        user: &User,
        cw: &CourseworkId,
        upload: Upload,
    ) -> ApiResult<SubmissionView> {
        let name = upload
            .name
            .as_deref()
            .map(str::trim)
            .unwrap_or(upload.kind.as_str())
            .to_owned();
        if name.is_empty() || name.len() > 200 || name.chars().any(char::is_control) {
            return Err(ApiError::bad_request(
                "submission name must be 1-200 printable characters",
            ));
        }
        let mut guard = self.db();
        let db = &mut *guard;
        let row = load_coursework(&db.conn, cw)?;
        let stage = row.cw.stage;
        let actor = actor_for(&db.conn, user, cw)?;
        let sizes: Vec<(String, usize)> = upload
            .files
            .iter()
            .map(|(p, b)| (p.clone(), b.len()))
            .collect();
        let paths = lifecycle::check_upload(
            &actor,
            stage,
            upload.kind,
            &sizes,
            self.config().upload_limit_bytes,
        )
        .map_err(|e| ApiError::from(e).at_stage(stage))?;
        let mut files = Vec::with_capacity(paths.len());
        for (path, (_, bytes)) in paths.into_iter().zip(&upload.files) {
            files.push(StoredFile {
                path,
                sha256: db.blobs.put(bytes)?,
                size: bytes.len() as u64,
            });
        }

        let tx = db.conn.transaction()?;
        let previous = query_submissions(
            &tx,
            "coursework_id = ?1 AND owner_id = ?2 AND kind = ?3 AND name = ?4",
            &[
                cw.as_str(),
                user.user_id.as_str(),
                upload.kind.as_str(),
                &name,
            ],
        )?
        .pop();
        if let Some(prev) = previous.filter(|p| p.files == files) {
            // An identical re-upload is the same version, not a new one.
            drop(tx);
            return submission_view(&db.conn, user, View::FullSource, &prev, None);
        }
        let version: u32 = tx.query_row(
            "SELECT COALESCE(MAX(version), 0) + 1 FROM submissions
             WHERE coursework_id = ?1 AND owner_id = ?2 AND kind = ?3 AND name = ?4",
            params![
                cw.as_str(),
                user.user_id.as_str(),
                upload.kind.as_str(),
                name
            ],
            |r| r.get(0),
        )?;
        let sub = Submission {
            submission_id: SubmissionId::generate(),
            coursework_id: cw.clone(),
            owner_id: user.user_id.clone(),
            kind: upload.kind,
            name,
            version,
            files,
            created_at: super::now(),
        };
        tx.execute(
            "INSERT INTO submissions (submission_id, coursework_id, owner_id, kind, name, version, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![
                sub.submission_id.as_str(),
                cw.as_str(),
                user.user_id.as_str(),
                sub.kind.as_str(),
                sub.name,
                version,
                ts(sub.created_at)
            ],
        )?;
        for (seq, f) in sub.files.iter().enumerate() {
            tx.execute(
                "INSERT INTO submission_files (submission_id, seq, path, sha256, size) VALUES (?1, ?2, ?3, ?4, ?5)",
                params![sub.submission_id.as_str(), seq as i64, f.path, f.sha256, f.size as i64],
            )?;
        }
        record_event(
            &tx,
            cw,
            &user.user_id,
            Action::Submitted,
            sub.submission_id.as_str(),
            &format!("{} {} v{}", sub.kind, sub.name, sub.version),
        )?;
        tx.commit()?;
        submission_view(&db.conn, user, View::FullSource, &sub, None)
    }

    pub fn list_submissions(
        &self,
        user: &User,
        cw: &CourseworkId,
        filter: SubmissionFilter,
    ) -> ApiResult<Vec<SubmissionView>> {
        let db = self.db();
        let row = load_coursework(&db.conn, cw)?;
        let actor = actor_for(&db.conn, user, cw)?;
        if user.role == Role::Student && !actor.enrolled {
            return Err(super::courseworks::not_enrolled(row.cw.stage));
        }
        let uid = user.user_id.as_str();
        let subs = match filter {
            SubmissionFilter::Mine => query_submissions(&db.conn, "coursework_id = ?1 AND owner_id = ?2", &[cw.as_str(), uid])?,
            SubmissionFilter::Peers => query_submissions(
                &db.conn,
                "coursework_id = ?1 AND owner_id <> ?2 AND owner_id IN (SELECT user_id FROM users WHERE role = 'student')",
                &[cw.as_str(), uid],
            )?,
            SubmissionFilter::Provided => query_submissions(
                &db.conn,
                "coursework_id = ?1 AND owner_id IN (SELECT user_id FROM users WHERE role = 'teacher')",
                &[cw.as_str()],
            )?,
            SubmissionFilter::All => query_submissions(&db.conn, "coursework_id = ?1", &[cw.as_str()])?,
        };
        let mut out = Vec::new();
        for sub in &subs {
            let view = view_of(&db.conn, &actor, row.cw.stage, sub)?;
            if view != View::Hidden {
                out.push(submission_view(&db.conn, user, view, sub, None)?);
            }
        }
        Ok(out)
    }

    /// A submission with its files. Contents are included only for full
    /// source views; oracle solutions yield metadata to students.
    pub fn submission_files(&self, user: &User, id: &SubmissionId) -> ApiResult<SubmissionView> {
        let db = self.db();
        let sub = load_submission(&db.conn, id)?;
        let row = load_coursework(&db.conn, &sub.coursework_id)?;
        let actor = actor_for(&db.conn, user, &sub.coursework_id)?;
        let view = view_of(&db.conn, &actor, row.cw.stage, &sub)?;
        if view == View::Hidden {
            let owner_role = load_user(&db.conn, &sub.owner_id)?.role;
            let same_group = owner_role == Role::Student
                && load_plan(&db.conn, &sub.coursework_id, row.group_size_target)?
                    .same_group(&actor.user_id, &sub.owner_id);
            return Err(hidden_denial(&actor, row.cw.stage, &sub, same_group));
        }
        let read = |f: &StoredFile| -> ApiResult<Vec<u8>> { Ok(db.blobs.get(&f.sha256)?) };
        submission_view(&db.conn, user, view, &sub, Some(&read))
    }

    /// Raw bytes of one file of a submission, under the same visibility rules.
    pub fn submission_file(
        &self,
        user: &User,
        id: &SubmissionId,
        path: &str,
    ) -> ApiResult<(StoredFile, Vec<u8>)> {
        let view = self.submission_files(user, id)?;
        if view.view != View::FullSource {
            let db = self.db();
            let sub = load_submission(&db.conn, id)?;
            let stage = load_coursework(&db.conn, &sub.coursework_id)?.cw.stage;
            return Err(ApiError::new(
                axum::http::StatusCode::FORBIDDEN,
                "permission_denied",
                format!(
                    "the source of this {} is not available to students",
                    sub.kind
                ),
            )
            .at_stage(stage)
            .for_capability(Capability::ViewPeerSource));
        }
        let db = self.db();
        let sub = load_submission(&db.conn, id)?;
        let file = sub
            .files
            .into_iter()
            .find(|f| f.path == path)
            .ok_or_else(|| ApiError::not_found(format!("file `{path}`")))?;
        let bytes = db.blobs.get(&file.sha256)?;
        Ok((file, bytes))
    }
}
