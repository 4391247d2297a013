//! Activity events: the append-only learners log teachers assess from.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::model::{CourseworkId, Stage, UserId, VerdictSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    CourseworkCreated,
    CourseworkUpdated,
    Enrolled,
    StageAdvanced,
    Submitted,
    RunRequested,
    RunFinished,
    CommentPosted,
    CommentEdited,
    GroupAmended,
}

impl Action {
    pub const ALL: [Action; 10] = [
        Action::CourseworkCreated,
        Action::CourseworkUpdated,
        Action::Enrolled,
        Action::StageAdvanced,
        Action::Submitted,
        Action::RunRequested,
        Action::RunFinished,
        Action::CommentPosted,
        Action::CommentEdited,
        Action::GroupAmended,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::CourseworkCreated => "coursework_created",
            Action::CourseworkUpdated => "coursework_updated",
            Action::Enrolled => "enrolled",
            Action::StageAdvanced => "stage_advanced",
            Action::Submitted => "submitted",
            Action::RunRequested => "run_requested",
            Action::RunFinished => "run_finished",
            Action::CommentPosted => "comment_posted",
            Action::CommentEdited => "comment_edited",
            Action::GroupAmended => "group_amended",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Action::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| CoreError::Invalid(format!("unknown action `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityEvent {
    pub event_id: i64,
    pub coursework_id: CourseworkId,
    pub actor_id: UserId,
    pub action: Action,
    pub subject_id: String,
    /// Short action-specific annotation (new stage number, submission kind).
    pub detail: String,
    pub timestamp: DateTime<Utc>,
}

impl ActivityEvent {
    /// One tab-separated export line, without the trailing newline.
    pub fn to_tsv(&self) -> String {
        let clean = |s: &str| s.replace(['\t', '\n', '\r'], " ");
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.event_id,
            self.timestamp.to_rfc3339_opts(SecondsFormat::Micros, true),
            self.coursework_id,
            self.actor_id,
            self.action,
            clean(&self.subject_id),
            clean(&self.detail),
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self, CoreError> {
        let bad = || CoreError::Invalid(format!("malformed event line `{line}`"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        Ok(Self {
            event_id: f[0].parse().map_err(|_| bad())?,
            timestamp: DateTime::parse_from_rfc3339(f[1])
                .map_err(|_| bad())?
                .with_timezone(&Utc),
            coursework_id: f[2].into(),
            actor_id: f[3].into(),
            action: f[4].parse()?,
            subject_id: f[5].to_owned(),
            detail: f[6].to_owned(),
        })
    }
}

pub fn export_tsv(events: &[ActivityEvent]) -> String {
    events.iter().map(|e| e.to_tsv() + "\n").collect()
}

/// Artifact linked from a learners-log entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LinkedArtifact {
    Submission {
        submission_id: String,
        kind: String,
        version: u32,
    },
    Run {
        run_id: String,
        status: String,
        summary: VerdictSummary,
    },
    Comment {
        comment_id: String,
        revision_count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    #[serde(flatten)]
    pub event: ActivityEvent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<LinkedArtifact>,
}

/// Event ids and timestamps must agree on order.
pub fn is_chronological(events: &[ActivityEvent]) -> bool {
    events
        .windows(2)
        .all(|w| w[0].event_id < w[1].event_id && w[0].timestamp <= w[1].timestamp)
}

/// Stages recorded by `stage_advanced` events, preceded by the implicit
/// initial stage 0.
pub fn stage_history(events: &[ActivityEvent]) -> Vec<Stage> {
    let mut stages = vec![Stage::Setup];
    stages.extend(
        events
            .iter()
            .filter(|e| e.action == Action::StageAdvanced)
            .filter_map(|e| e.detail.parse::<u8>().ok().and_then(Stage::from_number)),
    );
    stages
}
