use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use peertest_core::permissions::{Capability, Denial};
use peertest_core::{CoreError, Stage};
use serde::{Deserialize, Serialize};

/// Every error response carries this body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub stage: Option<u8>,
    pub capability: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

pub type ApiResult<T> = Result<T, ApiError>;

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                stage: None,
                capability: None,
            },
        }
    }

    pub fn unauthenticated() -> Self {
        Self::new(
            StatusCode::UNAUTHORIZED,
            "unauthenticated",
            "missing, invalid or expired session token",
        )
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid", message)
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        let what = what.into();
        Self::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("{what} not found"),
        )
    }

    pub fn internal(message: impl std::fmt::Display) -> Self {
        tracing::error!("internal error: {message}");
        Self::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            "internal server error",
        )
    }

    pub fn denied(denial: Denial) -> Self {
        CoreError::PermissionDenied(denial).into()
    }

    /// Fills in the coursework stage when the error does not already name one.
    pub fn at_stage(mut self, stage: Stage) -> Self {
        self.body.stage.get_or_insert(stage.number());
        self
    }

    pub fn for_capability(mut self, cap: Capability) -> Self {
        self.body
            .capability
            .get_or_insert_with(|| cap.as_str().to_owned());
        self
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        use CoreError::*;
        let status = match &e {
            NotTeacher | PermissionDenied(_) | NotAuthor => StatusCode::FORBIDDEN,
            AlreadyFinal | SetupIncomplete { .. } | StageTooLate(_) | ThreadLocked(_) => {
                StatusCode::CONFLICT
            }
            TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            UnknownUser(_) | UnknownSubmission(_) | NotFound(_) | UnknownStudent(_)
            | UnknownGroup(_) => StatusCode::NOT_FOUND,
            EmptyUpload
            | InvalidPath(_)
            | TooFewStudents(_)
            | EmptyBody
            | IncompatibleKinds { .. }
            | Invalid(_) => StatusCode::BAD_REQUEST,
        };
        let (stage, capability) = match &e {
            PermissionDenied(d) => (
                Some(d.stage.number()),
                Some(d.capability.as_str().to_owned()),
            ),
            StageTooLate(s) | ThreadLocked(s) => (Some(s.number()), None),
            _ => (None, None),
        };
        Self {
            status,
            body: ErrorBody {
                code: e.code().into(),
                message: e.to_string(),
                stage,
                capability,
            },
        }
    }
}

impl From<rusqlite::Error> for ApiError {
    fn from(e: rusqlite::Error) -> Self {
        ApiError::internal(format!("database: {e}"))
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::internal(format!("storage: {e}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
