//! Two-way discussion threads attached to peer test runs.
//!
//! Comments are never deleted; an edit appends a revision. Students see the
//! latest body with an `edited` marker, teachers can read every revision.

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{CommentId, Role, Stage, SubmissionKind, ThreadId, UserId};
use crate::permissions::{permitted, AccessContext, Actor, Capability, Decision};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participants {
    pub tester_id: UserId,
    pub developer_id: UserId,
}

impl Participants {
    pub fn contains(&self, user: &UserId) -> bool {
        &self.tester_id == user || &self.developer_id == user
    }
}

/// Who may discuss a run: its requester and the owner of the tested
/// solution. Only runs by a student against another student's solution get
/// a thread.
pub fn thread_participants(
    requester: &UserId,
    requester_role: Role,
    target_owner: &UserId,
    target_owner_role: Role,
    target_kind: SubmissionKind,
) -> Option<Participants> {
    let peer_run = target_kind == SubmissionKind::Solution
        && requester_role == Role::Student
        && target_owner_role == Role::Student
        && requester != target_owner;
    peer_run.then(|| Participants {
        tester_id: requester.clone(),
        developer_id: target_owner.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackThread {
    pub thread_id: ThreadId,
    pub run_id: crate::model::RunId,
    pub participants: Participants,
    pub locked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revision {
    pub body: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comment {
    pub comment_id: CommentId,
    pub thread_id: ThreadId,
    pub author_id: UserId,
    pub revisions: Vec<Revision>,
    pub created_at: DateTime<Utc>,
}

impl Comment {
    pub fn new(
        thread_id: ThreadId,
        author_id: UserId,
        body: &str,
        now: DateTime<Utc>,
    ) -> Result<Self> {
        let body = clean_body(body)?;
        Ok(Self {
            comment_id: CommentId::generate(),
            thread_id,
            author_id,
            revisions: vec![Revision { body, at: now }],
            created_at: now,
        })
    }

    pub fn body(&self) -> &str {
        &self
            .revisions
            .last()
            .expect("comments always have a revision")
            .body
    }

    pub fn edited(&self) -> bool {
        self.revisions.len() > 1
    }

    /// Appends a revision. Its timestamp is nudged forward if the clock has
    /// not moved past the previous revision.
    pub fn revise(&mut self, body: &str, now: DateTime<Utc>) -> Result<&Revision> {
        let body = clean_body(body)?;
        let last = self
            .revisions
            .last()
            .expect("comments always have a revision")
            .at;
        let at = if now > last {
            now
        } else {
            last + Duration::microseconds(1)
        };
        self.revisions.push(Revision { body, at });
        Ok(self.revisions.last().unwrap())
    }
}

fn clean_body(body: &str) -> Result<String> {
    if body.trim().is_empty() {
        Err(CoreError::EmptyBody)
    } else {
        Ok(body.to_owned())
    }
}

/// Preconditions for posting on a run's thread. `participants` is `None` for
/// runs that cannot carry a discussion (self runs, oracle runs).
pub fn check_post(
    actor: &Actor,
    stage: Stage,
    participants: Option<&Participants>,
    body: &str,
) -> Result<()> {
    if stage == Stage::TeacherFeedback {
        return Err(CoreError::ThreadLocked(stage));
    }
    let is_participant = participants.is_some_and(|p| p.contains(&actor.user_id));
    let ctx = AccessContext::new(actor.clone(), stage).with_participant(is_participant);
    if let Decision::Deny(d) = permitted(Capability::PostFeedback, &ctx) {
        return Err(CoreError::PermissionDenied(d));
    }
    clean_body(body).map(|_| ())
}

pub fn check_edit(actor: &Actor, stage: Stage, comment: &Comment) -> Result<()> {
    if comment.author_id != actor.user_id {
        return Err(CoreError::NotAuthor);
    }
    if stage >= Stage::TeacherFeedback {
        return Err(CoreError::ThreadLocked(stage));
    }
    Ok(())
}

/// Comment as shown to a viewer. Revisions are only included for teachers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentView {
    pub comment_id: CommentId,
    pub author: String,
    pub body: String,
    pub edited: bool,
    pub revision_count: usize,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revisions: Option<Vec<Revision>>,
}

impl CommentView {
    pub fn render(comment: &Comment, viewer_role: Role, author_label: String) -> Self {
        let last = comment
            .revisions
            .last()
            .expect("comments always have a revision");
        Self {
            comment_id: comment.comment_id.clone(),
            author: author_label,
            body: last.body.clone(),
            edited: comment.edited(),
            revision_count: comment.revisions.len(),
            created_at: comment.created_at,
            updated_at: last.at,
            revisions: (viewer_role == Role::Teacher).then(|| comment.revisions.clone()),
        }
    }
}

/// Plain-text transcript of a thread, every revision annotated.
pub fn transcript(header: &str, comments: &[(String, &Comment)]) -> String {
    let mut out = format!("== {header}\n");
    for (author, c) in comments {
        for (i, rev) in c.revisions.iter().enumerate() {
            let tag = if i == 0 {
                "posted".to_string()
            } else {
                format!("edit {i}")
            };
            out.push_str(&format!(
                "[{}] {} ({}):\n",
                rev.at.to_rfc3339(),
                author,
                tag
            ));
            for line in rev.body.lines() {
                out.push_str("    ");
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}
