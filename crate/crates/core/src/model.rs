use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;

macro_rules! opaque_id {
    ($($(#[$meta:meta])* $name:ident),* $(,)?) => {$(
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn generate() -> Self {
                Self(uuid::Uuid::new_v4().simple().to_string())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    )*};
}

opaque_id!(
    UserId,
    CourseworkId,
    SubmissionId,
    RunId,
    ThreadId,
    CommentId,
    /// Group labels are short and human readable ("g1", "g2", ...), unique per coursework.
    GroupId,
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

impl FromStr for Role {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "student" => Ok(Role::Student),
            other => Err(CoreError::Invalid(format!("unknown role `{other}`"))),
        }
    }
}

/// Lifecycle stage of a coursework. Stages only move forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    Setup = 0,
    SelfTesting = 1,
    PeerTesting = 2,
    TeacherFeedback = 3,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Setup,
        Stage::SelfTesting,
        Stage::PeerTesting,
        Stage::TeacherFeedback,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<Stage> {
        Stage::ALL.get(n as usize).copied()
    }

    pub fn next(self) -> Option<Stage> {
        Stage::from_number(self.number() + 1)
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Setup => "Coursework Setup",
            Stage::SelfTesting => "Development & Self-Testing",
            Stage::PeerTesting => "Peer-Testing & Feedback",
            Stage::TeacherFeedback => "Teacher Feedback",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} ({})", self.number(), self.name())
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, Self::Error> {
        Stage::from_number(n).ok_or_else(|| format!("stage must be 0..=3, got {n}"))
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionKind {
    Solution,
    TestSuite,
    OracleSolution,
    SignatureTest,
    TeacherTest,
    ReflectiveReport,
}

impl SubmissionKind {
    pub const ALL: [SubmissionKind; 6] = [
        SubmissionKind::Solution,
        SubmissionKind::TestSuite,
        SubmissionKind::OracleSolution,
        SubmissionKind::SignatureTest,
        SubmissionKind::TeacherTest,
        SubmissionKind::ReflectiveReport,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubmissionKind::Solution => "solution",
            SubmissionKind::TestSuite => "test_suite",
            SubmissionKind::OracleSolution => "oracle_solution",
            SubmissionKind::SignatureTest => "signature_test",
            SubmissionKind::TeacherTest => "teacher_test",
            SubmissionKind::ReflectiveReport => "reflective_report",
        }
    }

    /// Kinds that can be executed as a test suite.
    pub fn is_suite(self) -> bool {
        matches!(
            self,
            SubmissionKind::TestSuite | SubmissionKind::SignatureTest | SubmissionKind::TeacherTest
        )
    }

    /// Kinds that a test suite can be run against.
    pub fn is_target(self) -> bool {
        matches!(
            self,
            SubmissionKind::Solution | SubmissionKind::OracleSolution
        )
    }

    pub fn teacher_only(self) -> bool {
        matches!(
            self,
            SubmissionKind::OracleSolution
                | SubmissionKind::SignatureTest
                | SubmissionKind::TeacherTest
        )
    }
}

impl fmt::Display for SubmissionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubmissionKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SubmissionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CoreError::Invalid(format!("unknown submission kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub user_id: UserId,
    pub username: String,
    pub display_name: String,
    pub role: Role,
    pub campus: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enrollment {
    pub user_id: UserId,
    pub coursework_id: CourseworkId,
    pub pseudonym: String,
    pub enrolled_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coursework {
    pub coursework_id: CourseworkId,
    pub title: String,
    pub spec_document: Option<StoredFile>,
    pub stage: Stage,
    pub runner_profile_id: String,
    #[serde(default)]
    pub stage_deadlines: BTreeMap<u8, DateTime<Utc>>,
    pub created_by: UserId,
    pub created_at: DateTime<Utc>,
}

/// A file held in the content-addressed blob store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredFile {
    pub path: String,
    pub sha256: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub submission_id: SubmissionId,
    pub coursework_id: CourseworkId,
    pub owner_id: UserId,
    pub kind: SubmissionKind,
    /// Logical name; versions are numbered per (owner, coursework, kind, name).
    pub name: String,
    pub version: u32,
    pub files: Vec<StoredFile>,
    pub created_at: DateTime<Utc>,
}

impl Submission {
    pub fn total_size(&self) -> u64 {
        self.files.iter().map(|f| f.size).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerGroup {
    pub group_id: GroupId,
    pub members: BTreeSet<UserId>,
}

impl PeerGroup {
    /// Groups below two members cannot peer-test and need teacher action.
    pub fn undersized(&self) -> bool {
        self.members.len() < 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Queued,
    Running,
    Finished,
    Errored,
    TimedOut,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Queued => "queued",
            RunStatus::Running => "running",
            RunStatus::Finished => "finished",
            RunStatus::Errored => "errored",
            RunStatus::TimedOut => "timed_out",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RunStatus::Finished | RunStatus::Errored | RunStatus::TimedOut
        )
    }
}

impl FromStr for RunStatus {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "queued" => RunStatus::Queued,
            "running" => RunStatus::Running,
            "finished" => RunStatus::Finished,
            "errored" => RunStatus::Errored,
            "timed_out" => RunStatus::TimedOut,
            other => return Err(CoreError::Invalid(format!("unknown run status `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub test_name: String,
    pub outcome: Outcome,
}

impl Verdict {
    pub fn new(test_name: impl Into<String>, outcome: Outcome) -> Self {
        Self {
            test_name: test_name.into(),
            outcome,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    CompileError,
    RunnerCrash,
    ParseFailure,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub wall_millis: u64,
    pub cpu_millis: u64,
    pub max_rss_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictSummary {
    pub pass: usize,
    pub fail: usize,
    pub error: usize,
}

impl VerdictSummary {
    pub fn of(verdicts: &[Verdict]) -> Self {
        let mut s = VerdictSummary::default();
        for v in verdicts {
            match v.outcome {
                Outcome::Pass => s.pass += 1,
                Outcome::Fail => s.fail += 1,
                Outcome::Error => s.error += 1,
            }
        }
        s
    }

    pub fn all_pass(&self) -> bool {
        self.pass > 0 && self.fail == 0 && self.error == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRun {
    pub run_id: RunId,
    pub coursework_id: CourseworkId,
    pub requester_id: UserId,
    pub suite_submission_id: SubmissionId,
    pub target_submission_id: SubmissionId,
    pub queue_position: i64,
    pub status: RunStatus,
    pub error_category: Option<ErrorCategory>,
    pub verdicts: Vec<Verdict>,
    pub sanitized_output: String,
    pub command_log: Vec<String>,
    pub raw_exit_code: Option<i32>,
    pub queued_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub resource_usage: Option<ResourceUsage>,
}

/// Validates and normalises a relative upload path: `/`-separated, no empty,
/// `.` or `..` components, no leading slash, no control characters.
pub fn normalize_rel_path(raw: &str) -> Result<String, CoreError> {
    let bad = || CoreError::InvalidPath(raw.to_owned());
    let unified = raw.replace('\\', "/");
    if unified.starts_with('/') || unified.chars().any(|c| c.is_control()) {
        return Err(bad());
    }
    let parts: Vec<&str> = unified.split('/').filter(|p| !p.is_empty()).collect();
    if parts.is_empty() || parts.iter().any(|p| *p == "." || *p == "..") {
        return Err(bad());
    }
    Ok(parts.join("/"))
}
