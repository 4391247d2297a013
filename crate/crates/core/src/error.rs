use thiserror::Error;

use crate::model::Stage;
use crate::permissions::Denial;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    #[error("only teachers may perform this action")]
    NotTeacher,
    #[error("the coursework is already in its final stage")]
    AlreadyFinal,
    #[error("setup incomplete: missing {}", .missing.join(" and "))]
    SetupIncomplete { missing: Vec<&'static str> },
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("enrollment is closed in {0}")]
    StageTooLate(Stage),
    #[error("{}", .0.message)]
    PermissionDenied(Denial),
    #[error("upload contains no files")]
    EmptyUpload,
    #[error("upload is {size} bytes, limit is {limit} bytes")]
    TooLarge { size: u64, limit: u64 },
    #[error("invalid file path `{0}`")]
    InvalidPath(String),
    #[error("need at least two students to form groups, have {0}")]
    TooFewStudents(usize),
    #[error("`{0}` is not an enrolled student of this coursework")]
    UnknownStudent(String),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("comment body is empty")]
    EmptyBody,
    #[error("discussion threads are locked in {0}")]
    ThreadLocked(Stage),
    #[error("only the author may edit this comment")]
    NotAuthor,
    #[error("unknown submission `{0}`")]
    UnknownSubmission(String),
    #[error("cannot run a {suite} against a {target}")]
    IncompatibleKinds {
        suite: &'static str,
        target: &'static str,
    },
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
}

impl CoreError {
    /// Stable machine-readable code used in API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            CoreError::NotTeacher => "not_teacher",
            CoreError::AlreadyFinal => "already_final",
            CoreError::SetupIncomplete { .. } => "setup_incomplete",
            CoreError::UnknownUser(_) => "unknown_user",
            CoreError::StageTooLate(_) => "stage_too_late",
            CoreError::PermissionDenied(_) => "permission_denied",
            CoreError::EmptyUpload => "empty_upload",
            CoreError::TooLarge { .. } => "too_large",
            CoreError::InvalidPath(_) => "invalid_path",
            CoreError::TooFewStudents(_) => "too_few_students",
            CoreError::UnknownStudent(_) => "unknown_student",
            CoreError::UnknownGroup(_) => "unknown_group",
            CoreError::EmptyBody => "empty_body",
            CoreError::ThreadLocked(_) => "thread_locked",
            CoreError::NotAuthor => "not_author",
            CoreError::UnknownSubmission(_) => "unknown_submission",
            CoreError::IncompatibleKinds { .. } => "incompatible_kinds",
            CoreError::NotFound(_) => "not_found",
            CoreError::Invalid(_) => "invalid",
        }
    }
}
