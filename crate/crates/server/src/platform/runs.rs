use chrono::{DateTime, Utc};
use peertest_core::feedback::{thread_participants, Participants};
use peertest_core::monitoring::Action;
use peertest_core::permissions::{permitted, AccessContext, Capability, Decision, View};
use peertest_core::{
    CoreError, CourseworkId, ErrorCategory, ResourceUsage, Role, RunId, RunStatus, Stage,
    Submission, SubmissionId, SubmissionKind, User, UserId, Verdict, VerdictSummary,
};
use peertest_harness::profile::RunnerProfile;
use peertest_harness::{ExecutionReport, RunFile};
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use super::feedback::{thread_view, ThreadView};
use super::submissions::{submission_view, view_of, SubmissionView};
use super::{
    actor_for, load_coursework, load_plan, load_submission, load_user, parse_ts, person,
    record_event, ts, Person, Platform,
};
use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunFilter {
    /// Runs the caller requested.
    Mine,
    /// Runs of other people's suites against the caller's solutions.
    AgainstMe,
    /// Every run of the coursework; teachers only.
    All,
}

/// What kind of pairing a run is, for display.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// Against the requester's own solution.
    SelfTest,
    /// Against a teacher-provided solution.
    Oracle,
    /// Against another student's solution.
    Peer,
}

/// Compact run listing entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRef {
    pub run_id: String,
    pub coursework_id: String,
    pub kind: RunKind,
    pub status: RunStatus,
    pub summary: VerdictSummary,
    pub requester: Person,
    pub target_owner: Person,
    pub suite_id: String,
    pub target_id: String,
    pub queue_position: i64,
    pub queued_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub coursework_id: String,
    pub kind: RunKind,
    pub status: RunStatus,
    pub error_category: Option<ErrorCategory>,
    pub error_message: Option<String>,
    pub verdicts: Vec<Verdict>,
    pub summary: VerdictSummary,
    pub sanitized_output: String,
    pub command_log: Vec<String>,
    pub exit_code: Option<i32>,
    pub queue_position: i64,
    pub queued_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub resource_usage: Option<ResourceUsage>,
    pub requester: Person,
    pub suite: SubmissionView,
    pub target: SubmissionView,
    /// Present for peer runs, which carry a two-way discussion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discussion: Option<ThreadView>,
    /// The viewer may post to the discussion now.
    pub discussion_allowed: bool,
    /// True when this request found an existing run for the same pair.
    #[serde(default)]
    pub memoized: bool,
}

/// Work handed to an execution worker.
pub struct RunJob {
    pub run_id: RunId,
    pub profile: RunnerProfile,
    pub suite: Vec<RunFile>,
    pub target: Vec<RunFile>,
}

pub(crate) struct RunRow {
    pub run_id: RunId,
    pub coursework_id: CourseworkId,
    pub requester_id: UserId,
    pub suite_id: SubmissionId,
    pub target_id: SubmissionId,
    pub queue_position: i64,
    pub status: RunStatus,
    pub error_category: Option<ErrorCategory>,
    pub error_message: Option<String>,
    pub verdicts: Vec<Verdict>,
    pub sanitized_output: String,
    pub command_log: Vec<String>,
    pub exit_code: Option<i32>,
    pub queued_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub usage: Option<ResourceUsage>,
}

const RUN_COLS: &str = "run_id, coursework_id, requester_id, suite_id, target_id, queue_position, status, error_category,
    error_message, verdicts, sanitized_output, command_log, exit_code, queued_at, started_at, finished_at,
    wall_millis, cpu_millis, max_rss_bytes";

fn json_col<T: serde::de::DeserializeOwned>(s: &str) -> rusqlite::Result<T> {
    serde_json::from_str(s).map_err(|e| {
        rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e))
    })
}

fn opt_ts(s: Option<String>) -> rusqlite::Result<Option<DateTime<Utc>>> {
    s.as_deref().map(parse_ts).transpose()
}

fn run_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<RunRow> {
    let category: Option<String> = r.get(7)?;
    let wall: Option<i64> = r.get(16)?;
    Ok(RunRow {
        run_id: RunId(r.get(0)?),
        coursework_id: CourseworkId(r.get(1)?),
        requester_id: UserId(r.get(2)?),
        suite_id: SubmissionId(r.get(3)?),
        target_id: SubmissionId(r.get(4)?),
        queue_position: r.get(5)?,
        status: r.get::<_, String>(6)?.parse().map_err(|e: CoreError| {
            rusqlite::Error::FromSqlConversionFailure(6, rusqlite::types::Type::Text, Box::new(e))
        })?,
        error_category: category
            .map(|c| json_col(&format!("\"{c}\"")))
            .transpose()?,
        error_message: r.get(8)?,
        verdicts: json_col(&r.get::<_, String>(9)?)?,
        sanitized_output: r.get(10)?,
        command_log: json_col(&r.get::<_, String>(11)?)?,
        exit_code: r.get(12)?,
        queued_at: parse_ts(&r.get::<_, String>(13)?)?,
        started_at: opt_ts(r.get(14)?)?,
        finished_at: opt_ts(r.get(15)?)?,
        usage: match wall {
            Some(w) => Some(ResourceUsage {
                wall_millis: w as u64,
                cpu_millis: r.get::<_, Option<i64>>(17)?.unwrap_or(0) as u64,
                max_rss_bytes: r.get::<_, Option<i64>>(18)?.unwrap_or(0) as u64,
            }),
            None => None,
        },
    })
}

pub(crate) fn load_run(conn: &Connection, id: &RunId) -> ApiResult<RunRow> {
    conn.query_row(
        &format!("SELECT {RUN_COLS} FROM runs WHERE run_id = ?1"),
        [id.as_str()],
        run_from_row,
    )
    .optional()?
    .ok_or_else(|| ApiError::not_found(format!("run `{id}`")))
}

fn category_str(c: ErrorCategory) -> &'static str {
    match c {
        ErrorCategory::CompileError => "compile_error",
        ErrorCategory::RunnerCrash => "runner_crash",
        ErrorCategory::ParseFailure => "parse_failure",
    }
}

/// Who takes part in the discussion of a run, if it has one.
pub(crate) fn run_participants(conn: &Connection, run: &RunRow) -> ApiResult<Option<Participants>> {
    let requester = load_user(conn, &run.requester_id)?;
    let target = load_submission(conn, &run.target_id)?;
    let owner = load_user(conn, &target.owner_id)?;
    Ok(thread_participants(
        &requester.user_id,
        requester.role,
        &owner.user_id,
        owner.role,
        target.kind,
    ))
}

fn run_kind(requester: &UserId, target: &Submission, owner_role: Role) -> RunKind {
    if target.kind == SubmissionKind::OracleSolution || owner_role == Role::Teacher {
        RunKind::Oracle
    } else if &target.owner_id == requester {
        RunKind::SelfTest
    } else {
        RunKind::Peer
    }
}

fn check_kinds(suite: &Submission, target: &Submission) -> ApiResult<()> {
    if !suite.kind.is_suite() || !target.kind.is_target() {
        return Err(CoreError::IncompatibleKinds {
            suite: suite.kind.as_str(),
            target: target.kind.as_str(),
        }
        .into());
    }
    if suite.coursework_id != target.coursework_id {
        return Err(ApiError::bad_request(
            "suite and target belong to different courseworks",
        ));
    }
    Ok(())
}

fn forbidden_view() -> ApiError {
    ApiError::new(
        axum::http::StatusCode::FORBIDDEN,
        "permission_denied",
        "only the requester, the owner of the tested solution and teachers can view this run",
    )
}

impl Platform {
    /// Queues `suite` against `target`, or returns the existing run of the
    /// same pair by the same requester.
    pub fn request_run(
        &self,
        user: &User,
        suite_id: &SubmissionId,
        target_id: &SubmissionId,
    ) -> ApiResult<RunView> {
        let (view, fresh) = {
            let mut guard = self.db();
            let db = &mut *guard;
            let tx = db.conn.transaction()?;
            let suite = load_submission(&tx, suite_id)?;
            let target = load_submission(&tx, target_id)?;
            check_kinds(&suite, &target)?;
            let cw = suite.coursework_id.clone();
            let row = load_coursework(&tx, &cw)?;
            let stage = row.cw.stage;
            let actor = actor_for(&tx, user, &cw)?;
            let owner = load_user(&tx, &target.owner_id)?;
            let same_group = load_plan(&tx, &cw, row.group_size_target)?
                .same_group(&user.user_id, &target.owner_id);

            let cap = match run_kind(&user.user_id, &target, owner.role) {
                RunKind::Oracle => Capability::RunOracleTest,
                RunKind::SelfTest => Capability::RunSelfTest,
                RunKind::Peer => Capability::RunPeerTest,
            };
            let ctx = AccessContext::new(actor.clone(), stage).with_target(
                target.owner_id.clone(),
                target.kind,
                same_group,
            );
            super::require(permitted(cap, &ctx)).map_err(|e| e.at_stage(stage))?;
            // Running a suite means reading it.
            if view_of(&tx, &actor, stage, &suite)? != View::FullSource {
                let suite_owner = load_user(&tx, &suite.owner_id)?;
                let suite_group = suite_owner.role == Role::Student
                    && load_plan(&tx, &cw, row.group_size_target)?
                        .same_group(&user.user_id, &suite.owner_id);
                let ctx = AccessContext::new(actor.clone(), stage).with_target(
                    suite.owner_id.clone(),
                    suite.kind,
                    suite_group,
                );
                return Err(match permitted(Capability::ViewPeerSource, &ctx) {
                    Decision::Deny(d) => ApiError::denied(d),
                    Decision::Allow => ApiError::new(
                        axum::http::StatusCode::FORBIDDEN,
                        "permission_denied",
                        "you cannot run a test suite you are not allowed to read",
                    )
                    .at_stage(stage)
                    .for_capability(Capability::ViewPeerSource),
                });
            }

            let existing: Option<String> = tx
                .query_row(
                    "SELECT run_id FROM runs WHERE requester_id = ?1 AND suite_id = ?2 AND target_id = ?3",
                    [user.user_id.as_str(), suite_id.as_str(), target_id.as_str()],
                    |r| r.get(0),
                )
                .optional()?;
            let (run_id, fresh) = match existing {
                Some(id) => (RunId(id), false),
                None => {
                    let run_id = RunId::generate();
                    let position: i64 = tx.query_row(
                        "SELECT COALESCE(MAX(queue_position), 0) + 1 FROM runs",
                        [],
                        |r| r.get(0),
                    )?;
                    tx.execute(
                        "INSERT INTO runs (run_id, coursework_id, requester_id, suite_id, target_id, queue_position, status, queued_at)
                         VALUES (?1, ?2, ?3, ?4, ?5, ?6, 'queued', ?7)",
                        params![
                            run_id.as_str(),
                            cw.as_str(),
                            user.user_id.as_str(),
                            suite_id.as_str(),
                            target_id.as_str(),
                            position,
                            ts(super::now())
                        ],
                    )?;
                    record_event(
                        &tx,
                        &cw,
                        &user.user_id,
                        Action::RunRequested,
                        run_id.as_str(),
                        &format!("{suite_id} -> {target_id}"),
                    )?;
                    (run_id, true)
                }
            };
            tx.commit()?;
            let mut view = self.view_run(&db.conn, user, &load_run(&db.conn, &run_id)?)?;
            view.memoized = !fresh;
            (view, fresh.then_some(run_id))
        };
        if let Some(id) = fresh {
            self.notify_queue(id);
        }
        Ok(view)
    }

    pub fn get_run(&self, user: &User, id: &RunId) -> ApiResult<RunView> {
        let db = self.db();
        let run = load_run(&db.conn, id)?;
        self.view_run(&db.conn, user, &run)
    }

    fn view_run(&self, conn: &Connection, user: &User, run: &RunRow) -> ApiResult<RunView> {
        let suite = load_submission(conn, &run.suite_id)?;
        let target = load_submission(conn, &run.target_id)?;
        if user.role != Role::Teacher
            && user.user_id != run.requester_id
            && user.user_id != target.owner_id
        {
            return Err(forbidden_view());
        }
        let row = load_coursework(conn, &run.coursework_id)?;
        let actor = actor_for(conn, user, &run.coursework_id)?;
        let owner = load_user(conn, &target.owner_id)?;
        let participants = run_participants(conn, run)?;
        let discussion = match &participants {
            Some(p) => Some(thread_view(conn, user, run, p, row.cw.stage)?),
            None => None,
        };
        let discussion_allowed = participants.as_ref().is_some_and(|p| {
            let ctx = AccessContext::new(actor.clone(), row.cw.stage)
                .with_participant(p.contains(&user.user_id));
            row.cw.stage != Stage::TeacherFeedback
                && permitted(Capability::PostFeedback, &ctx).is_allowed()
        });
        let suite_view = view_of(conn, &actor, row.cw.stage, &suite)?;
        let target_view = view_of(conn, &actor, row.cw.stage, &target)?;
        Ok(RunView {
            run_id: run.run_id.to_string(),
            coursework_id: run.coursework_id.to_string(),
            kind: run_kind(&run.requester_id, &target, owner.role),
            status: run.status,
            error_category: run.error_category,
            error_message: run.error_message.clone(),
            verdicts: run.verdicts.clone(),
            summary: VerdictSummary::of(&run.verdicts),
            sanitized_output: run.sanitized_output.clone(),
            command_log: run.command_log.clone(),
            exit_code: run.exit_code,
            queue_position: run.queue_position,
            queued_at: run.queued_at,
            started_at: run.started_at,
            finished_at: run.finished_at,
            resource_usage: run.usage,
            requester: person(conn, user, &run.coursework_id, &run.requester_id)?,
            suite: submission_view(conn, user, suite_view, &suite, None)?,
            target: submission_view(conn, user, target_view, &target, None)?,
            discussion,
            discussion_allowed,
            memoized: false,
        })
    }

    pub fn list_runs(
        &self,
        user: &User,
        cw: Option<&CourseworkId>,
        filter: RunFilter,
    ) -> ApiResult<Vec<RunRef>> {
        let db = self.db();
        let uid = user.user_id.as_str();
        let (mut sql, mut args): (String, Vec<String>) = match filter {
            RunFilter::Mine => (
                format!("SELECT {RUN_COLS} FROM runs WHERE requester_id = ?1"),
                vec![uid.to_owned()],
            ),
            RunFilter::AgainstMe => (
                format!(
                    "SELECT {RUN_COLS} FROM runs WHERE requester_id <> ?1
                     AND target_id IN (SELECT submission_id FROM submissions WHERE owner_id = ?1)"
                ),
                vec![uid.to_owned()],
            ),
            RunFilter::All => {
                if user.role != Role::Teacher {
                    return Err(CoreError::NotTeacher.into());
                }
                (
                    format!("SELECT {RUN_COLS} FROM runs WHERE 1 = 1"),
                    Vec::new(),
                )
            }
        };
        if let Some(cw) = cw {
            load_coursework(&db.conn, cw)?;
            args.push(cw.to_string());
            sql.push_str(&format!(" AND coursework_id = ?{}", args.len()));
        }
        sql.push_str(" ORDER BY queue_position");
        let mut stmt = db.conn.prepare(&sql)?;
        let runs = stmt
            .query_map(rusqlite::params_from_iter(&args), run_from_row)?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        runs.iter()
            .map(|run| {
                let target = load_submission(&db.conn, &run.target_id)?;
                let owner = load_user(&db.conn, &target.owner_id)?;
                Ok(RunRef {
                    run_id: run.run_id.to_string(),
                    coursework_id: run.coursework_id.to_string(),
                    kind: run_kind(&run.requester_id, &target, owner.role),
                    status: run.status,
                    summary: VerdictSummary::of(&run.verdicts),
                    requester: person(&db.conn, user, &run.coursework_id, &run.requester_id)?,
                    target_owner: person(&db.conn, user, &run.coursework_id, &target.owner_id)?,
                    suite_id: run.suite_id.to_string(),
                    target_id: run.target_id.to_string(),
                    queue_position: run.queue_position,
                    queued_at: run.queued_at,
                    finished_at: run.finished_at,
                })
            })
            .collect()
    }

    // ---- worker side ----

    /// Moves every interrupted run back to the queue and returns the queue
    /// in order. Called once at startup, before workers start.
    pub(crate) fn recover_queue(&self) -> ApiResult<Vec<RunId>> {
        let db = self.db();
        let reset = db.conn.execute(
            "UPDATE runs SET status = 'queued', started_at = NULL WHERE status = 'running'",
            [],
        )?;
        if reset > 0 {
            tracing::info!("re-queued {reset} interrupted runs");
        }
        let mut stmt = db
            .conn
            .prepare("SELECT run_id FROM runs WHERE status = 'queued' ORDER BY queue_position")?;
        let ids = stmt
            .query_map([], |r| r.get::<_, String>(0))?
            .map(|r| r.map(RunId))
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(ids)
    }

    /// Claims a queued run. `None` when another worker got there first or
    /// the run is already terminal, which makes redelivery harmless.
    pub(crate) fn claim_run(&self, id: &RunId) -> ApiResult<Option<RunJob>> {
        let mut guard = self.db();
        let db = &mut *guard;
        let tx = db.conn.transaction()?;
        let claimed = tx.execute(
            "UPDATE runs SET status = 'running', started_at = ?2 WHERE run_id = ?1 AND status = 'queued'",
            params![id.as_str(), ts(super::now())],
        )?;
        if claimed == 0 {
            return Ok(None);
        }
        let run = load_run(&tx, id)?;
        let row = load_coursework(&tx, &run.coursework_id)?;
        let profile = self.coursework_profile(&tx, &row)?;
        let files = |sid: &SubmissionId| -> ApiResult<Vec<RunFile>> {
            load_submission(&tx, sid)?
                .files
                .iter()
                .map(|f| Ok(RunFile::new(f.path.clone(), db.blobs.get(&f.sha256)?)))
                .collect()
        };
        let job = RunJob {
            run_id: id.clone(),
            profile,
            suite: files(&run.suite_id)?,
            target: files(&run.target_id)?,
        };
        tx.commit()?;
        Ok(Some(job))
    }

    /// Stores a terminal result and its event in one transaction.
    pub(crate) fn complete_run(&self, id: &RunId, report: &ExecutionReport) -> ApiResult<bool> {
        let mut guard = self.db();
        let db = &mut *guard;
        let tx = db.conn.transaction()?;
        let run = load_run(&tx, id)?;
        let n = tx.execute(
            "UPDATE runs SET status = ?2, error_category = ?3, error_message = ?4, verdicts = ?5, sanitized_output = ?6,
                command_log = ?7, exit_code = ?8, finished_at = ?9, wall_millis = ?10, cpu_millis = ?11, max_rss_bytes = ?12
             WHERE run_id = ?1 AND status = 'running'",
            params![
                id.as_str(),
                report.status.as_str(),
                report.error_category.map(category_str),
                report.error_message,
                serde_json::to_string(&report.verdicts).expect("verdicts serialize"),
                report.sanitized_output,
                serde_json::to_string(&report.command_log).expect("log serializes"),
                report.exit_code,
                ts(super::now()),
                report.usage.wall_millis as i64,
                report.usage.cpu_millis as i64,
                report.usage.max_rss_bytes as i64,
            ],
        )?;
        if n == 0 {
            return Ok(false);
        }
        let s = VerdictSummary::of(&report.verdicts);
        let detail = match report.error_category {
            Some(c) => format!("{} {}", report.status.as_str(), category_str(c)),
            None => format!(
                "{} pass={} fail={} error={}",
                report.status.as_str(),
                s.pass,
                s.fail,
                s.error
            ),
        };
        record_event(
            &tx,
            &run.coursework_id,
            &run.requester_id,
            Action::RunFinished,
            id.as_str(),
            &detail,
        )?;
        tx.commit()?;
        Ok(true)
    }
}
