use peertest_core::feedback::{self, Comment, CommentView, Participants, Revision};
use peertest_core::monitoring::Action;
use peertest_core::{
    CommentId, CoreError, CourseworkId, Role, RunId, Stage, ThreadId, User, UserId,
};
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use super::runs::{load_run, run_participants, RunRow};
use super::{
    actor_for, load_coursework, load_user, parse_ts, person, record_event, ts, Person, Platform,
};
use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThreadView {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_id: Option<String>,
    pub tester: Person,
    pub developer: Person,
    /// Locked threads are read-only; every thread locks in the final stage.
    pub locked: bool,
    pub comments: Vec<CommentView>,
}

/// Plain-text transcripts of every discussion in a coursework.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptExport {
    pub threads: usize,
    pub text: String,
}

fn thread_id_of(conn: &Connection, run: &RunId) -> ApiResult<Option<ThreadId>> {
    Ok(conn
        .query_row(
            "SELECT thread_id FROM threads WHERE run_id = ?1",
            [run.as_str()],
            |r| r.get::<_, String>(0),
        )
        .optional()?
        .map(ThreadId))
}

fn load_comments(conn: &Connection, thread: &ThreadId) -> ApiResult<Vec<Comment>> {
    let mut stmt =
        conn.prepare("SELECT comment_id, author_id, created_at FROM comments WHERE thread_id = ?1 ORDER BY created_at, rowid")?;
    let heads = stmt
        .query_map([thread.as_str()], |r| {
            Ok((
                r.get::<_, String>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, String>(2)?,
            ))
        })?
        .collect::<rusqlite::Result<Vec<_>>>()?;
    heads
        .into_iter()
        .map(|(id, author, created)| {
            Ok(Comment {
                revisions: load_revisions(conn, &id)?,
                comment_id: CommentId(id),
                thread_id: thread.clone(),
                author_id: UserId(author),
                created_at: parse_ts(&created)?,
            })
        })
        .collect()
}

fn load_revisions(conn: &Connection, comment: &str) -> ApiResult<Vec<Revision>> {
    let mut stmt =
        conn.prepare("SELECT body, at FROM revisions WHERE comment_id = ?1 ORDER BY seq")?;
    let revs = stmt
        .query_map([comment], |r| {
            Ok(Revision {
                body: r.get(0)?,
                at: parse_ts(&r.get::<_, String>(1)?)?,
            })
        })?
        .collect::<rusqlite::Result<Vec<_>>>()?;
    Ok(revs)
}

/// Display names are only present where the viewer may see them.
fn label(p: &Person) -> String {
    p.display_name
        .clone()
        .or_else(|| p.pseudonym.clone())
        .unwrap_or_else(|| "unknown".into())
}

pub(crate) fn thread_view(
    conn: &Connection,
    viewer: &User,
    run: &RunRow,
    participants: &Participants,
    stage: Stage,
) -> ApiResult<ThreadView> {
    let thread_id = thread_id_of(conn, &run.run_id)?;
    let comments = match &thread_id {
        Some(t) => load_comments(conn, t)?,
        None => Vec::new(),
    };
    let views = comments
        .iter()
        .map(|c| {
            let author = person(conn, viewer, &run.coursework_id, &c.author_id)?;
            Ok(CommentView::render(c, viewer.role, label(&author)))
        })
        .collect::<ApiResult<_>>()?;
    Ok(ThreadView {
        thread_id: thread_id.map(|t| t.to_string()),
        tester: person(conn, viewer, &run.coursework_id, &participants.tester_id)?,
        developer: person(conn, viewer, &run.coursework_id, &participants.developer_id)?,
        locked: stage >= Stage::TeacherFeedback,
        comments: views,
    })
}

fn load_comment(conn: &Connection, id: &CommentId) -> ApiResult<(Comment, RunId)> {
    let head = conn
        .query_row(
            "SELECT c.thread_id, c.author_id, c.created_at, t.run_id FROM comments c
             JOIN threads t ON t.thread_id = c.thread_id WHERE c.comment_id = ?1",
            [id.as_str()],
            |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, String>(3)?,
                ))
            },
        )
        .optional()?
        .ok_or_else(|| ApiError::not_found(format!("comment `{id}`")))?;
    let comment = Comment {
        comment_id: id.clone(),
        thread_id: ThreadId(head.0),
        author_id: UserId(head.1),
        revisions: load_revisions(conn, id.as_str())?,
        created_at: parse_ts(&head.2)?,
    };
    Ok((comment, RunId(head.3)))
}

fn insert_revision(
    conn: &Connection,
    comment: &CommentId,
    seq: usize,
    rev: &Revision,
) -> ApiResult<()> {
    conn.execute(
        "INSERT INTO revisions (comment_id, seq, body, at) VALUES (?1, ?2, ?3, ?4)",
        params![comment.as_str(), seq as i64, rev.body, ts(rev.at)],
    )?;
    Ok(())
}

impl Platform {
    pub fn post_comment(&self, user: &User, run_id: &RunId, body: &str) -> ApiResult<CommentView> {
        let mut guard = self.db();
        let db = &mut *guard;
        let tx = db.conn.transaction()?;
        let run = load_run(&tx, run_id)?;
        let stage = load_coursework(&tx, &run.coursework_id)?.cw.stage;
        let actor = actor_for(&tx, user, &run.coursework_id)?;
        let participants = run_participants(&tx, &run)?;
        feedback::check_post(&actor, stage, participants.as_ref(), body)
            .map_err(|e| ApiError::from(e).at_stage(stage))?;
        let participants = participants.expect("check_post admits participants only");
        let thread = match thread_id_of(&tx, run_id)? {
            Some(t) => t,
            None => {
                let t = ThreadId::generate();
                tx.execute(
                    "INSERT INTO threads (thread_id, run_id, tester_id, developer_id) VALUES (?1, ?2, ?3, ?4)",
                    params![
                        t.as_str(),
                        run_id.as_str(),
                        participants.tester_id.as_str(),
                        participants.developer_id.as_str()
                    ],
                )?;
                t
            }
        };
        // Comments sort by creation time; keep it monotone within a thread.
        let last: Option<String> = tx.query_row(
            "SELECT MAX(created_at) FROM comments WHERE thread_id = ?1",
            [thread.as_str()],
            |r| r.get(0),
        )?;
        let mut now = super::now();
        if let Some(last) = last {
            now = now.max(parse_ts(&last)?);
        }
        let comment = Comment::new(thread.clone(), user.user_id.clone(), body, now)?;
        tx.execute(
            "INSERT INTO comments (comment_id, thread_id, author_id, created_at) VALUES (?1, ?2, ?3, ?4)",
            params![comment.comment_id.as_str(), thread.as_str(), user.user_id.as_str(), ts(comment.created_at)],
        )?;
        insert_revision(&tx, &comment.comment_id, 0, &comment.revisions[0])?;
        record_event(
            &tx,
            &run.coursework_id,
            &user.user_id,
            Action::CommentPosted,
            comment.comment_id.as_str(),
            run_id.as_str(),
        )?;
        tx.commit()?;
        let author = person(&db.conn, user, &run.coursework_id, &user.user_id)?;
        Ok(CommentView::render(&comment, user.role, label(&author)))
    }

    pub fn edit_comment(&self, user: &User, id: &CommentId, body: &str) -> ApiResult<CommentView> {
        let mut guard = self.db();
        let db = &mut *guard;
        let tx = db.conn.transaction()?;
        let (mut comment, run_id) = load_comment(&tx, id)?;
        let run = load_run(&tx, &run_id)?;
        let stage = load_coursework(&tx, &run.coursework_id)?.cw.stage;
        let actor = actor_for(&tx, user, &run.coursework_id)?;
        feedback::check_edit(&actor, stage, &comment)
            .map_err(|e| ApiError::from(e).at_stage(stage))?;
        let rev = comment.revise(body, super::now())?.clone();
        insert_revision(&tx, id, comment.revisions.len() - 1, &rev)?;
        record_event(
            &tx,
            &run.coursework_id,
            &user.user_id,
            Action::CommentEdited,
            id.as_str(),
            &format!("revision {}", comment.revisions.len()),
        )?;
        tx.commit()?;
        let author = person(&db.conn, user, &run.coursework_id, &user.user_id)?;
        Ok(CommentView::render(&comment, user.role, label(&author)))
    }

    /// Every discussion of a coursework with full revision history, for
    /// teachers.
    pub fn export_threads(&self, user: &User, cw: &CourseworkId) -> ApiResult<TranscriptExport> {
        if user.role != Role::Teacher {
            return Err(CoreError::NotTeacher.into());
        }
        let db = self.db();
        load_coursework(&db.conn, cw)?;
        let mut stmt = db.conn.prepare(
            "SELECT t.thread_id, t.run_id, t.tester_id, t.developer_id FROM threads t
             JOIN runs r ON r.run_id = t.run_id WHERE r.coursework_id = ?1 ORDER BY r.queue_position",
        )?;
        let threads = stmt
            .query_map([cw.as_str()], |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, String>(3)?,
                ))
            })?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        let mut text = String::new();
        for (thread, run, tester, developer) in &threads {
            let name = |id: &str| -> ApiResult<String> {
                Ok(load_user(&db.conn, &UserId(id.to_owned()))?.display_name)
            };
            let comments = load_comments(&db.conn, &ThreadId(thread.clone()))?;
            let labelled = comments
                .iter()
                .map(|c| Ok((name(c.author_id.as_str())?, c)))
                .collect::<ApiResult<Vec<_>>>()?;
            let header = format!("run {run}: {} tests {}", name(tester)?, name(developer)?);
            text.push_str(&feedback::transcript(&header, &labelled));
            text.push('\n');
        }
        Ok(TranscriptExport {
            threads: threads.len(),
            text,
        })
    }
}
