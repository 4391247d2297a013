use peertest_core::monitoring::{Action, ActivityEvent, LinkedArtifact, LogEntry};
use peertest_core::{
    CoreError, CourseworkId, Role, RunId, SubmissionId, User, UserId, VerdictSummary,
};
use rusqlite::Connection;

use super::runs::load_run;
use super::{load_coursework, load_submission, parse_ts, resolve_student, Platform};
use crate::error::{ApiError, ApiResult};

fn event_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<ActivityEvent> {
    Ok(ActivityEvent {
        event_id: r.get(0)?,
        coursework_id: CourseworkId(r.get(1)?),
        actor_id: UserId(r.get(2)?),
        action: r.get::<_, String>(3)?.parse().map_err(|e: CoreError| {
            rusqlite::Error::FromSqlConversionFailure(3, rusqlite::types::Type::Text, Box::new(e))
        })?,
        subject_id: r.get(4)?,
        detail: r.get(5)?,
        timestamp: parse_ts(&r.get::<_, String>(6)?)?,
    })
}

const EVENT_COLS: &str = "event_id, coursework_id, actor_id, action, subject_id, detail, timestamp";

fn artifact(conn: &Connection, e: &ActivityEvent) -> ApiResult<Option<LinkedArtifact>> {
    Ok(match e.action {
        Action::Submitted => {
            let s = load_submission(conn, &SubmissionId(e.subject_id.clone()))?;
            Some(LinkedArtifact::Submission {
                submission_id: s.submission_id.to_string(),
                kind: s.kind.as_str().to_owned(),
                version: s.version,
            })
        }
        Action::RunRequested | Action::RunFinished => {
            let run = load_run(conn, &RunId(e.subject_id.clone()))?;
            Some(LinkedArtifact::Run {
                run_id: run.run_id.to_string(),
                status: run.status.as_str().to_owned(),
                summary: VerdictSummary::of(&run.verdicts),
            })
        }
        Action::CommentPosted | Action::CommentEdited => {
            let count: i64 = conn.query_row(
                "SELECT COUNT(*) FROM revisions WHERE comment_id = ?1",
                [e.subject_id.as_str()],
                |r| r.get(0),
            )?;
            Some(LinkedArtifact::Comment {
                comment_id: e.subject_id.clone(),
                revision_count: count as usize,
            })
        }
        _ => None,
    })
}

impl Platform {
    /// The learners log of one student: everything they did, plus what was
    /// done to their enrollment and grouping, in order, with the artifacts attached.
    pub fn learner_log(
        &self,
        user: &User,
        cw: &CourseworkId,
        student: &str,
    ) -> ApiResult<Vec<LogEntry>> {
        if user.role != Role::Teacher {
            return Err(CoreError::NotTeacher.into());
        }
        let db = self.db();
        load_coursework(&db.conn, cw)?;
        let sid = resolve_student(&db.conn, cw, student)?
            .ok_or_else(|| ApiError::from(CoreError::UnknownStudent(student.to_owned())))?;
        let mut stmt = db.conn.prepare(&format!(
            "SELECT {EVENT_COLS} FROM events WHERE coursework_id = ?1
             AND (actor_id = ?2 OR (subject_id = ?2 AND action IN ('enrolled', 'group_amended'))
                  OR (subject_id = coursework_id AND action = 'group_amended'))
             ORDER BY event_id"
        ))?;
        let events = stmt
            .query_map([cw.as_str(), sid.as_str()], event_from_row)?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        events
            .into_iter()
            .map(|event| {
                let artifact = artifact(&db.conn, &event)?;
                Ok(LogEntry { event, artifact })
            })
            .collect()
    }

    /// Every event of a coursework, in order.
    pub fn coursework_log(&self, user: &User, cw: &CourseworkId) -> ApiResult<Vec<ActivityEvent>> {
        if user.role != Role::Teacher {
            return Err(CoreError::NotTeacher.into());
        }
        let db = self.db();
        load_coursework(&db.conn, cw)?;
        let mut stmt = db.conn.prepare(&format!(
            "SELECT {EVENT_COLS} FROM events WHERE coursework_id = ?1 ORDER BY event_id"
        ))?;
        let events = stmt
            .query_map([cw.as_str()], event_from_row)?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(events)
    }
}
