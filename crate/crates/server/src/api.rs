//! HTTP routes. Handlers authenticate, decode, and hand over to
//! [`Platform`] on the blocking pool; every rule lives there.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequestParts, Multipart, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use peertest_core::monitoring::export_tsv;
use peertest_core::{CommentId, CourseworkId, RunId, SubmissionId, SubmissionKind, User};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::platform::{
    CourseworkPatch, EnrollRequest, GroupRequest, NewCoursework, Platform, RunFilter,
    SubmissionFilter, Upload, UserView,
};

pub type AppState = Arc<Platform>;

pub fn router(platform: Arc<Platform>) -> Router {
    // Room for a full upload plus multipart or base64 overhead.
    let body_limit = (platform.config().upload_limit_bytes as usize).saturating_mul(2) + (1 << 20);
    let v1 = Router::new()
        .route("/login", post(login))
        .route("/logout", post(logout))
        .route("/me", get(me))
        .route(
            "/courseworks",
            get(list_courseworks).post(create_coursework),
        )
        .route(
            "/courseworks/{id}",
            get(get_coursework).patch(update_coursework),
        )
        .route("/courseworks/{id}/spec", get(spec_document))
        .route("/courseworks/{id}/advance", post(advance))
        .route("/courseworks/{id}/enroll", post(enroll))
        .route("/courseworks/{id}/groups", get(get_groups).put(set_groups))
        .route(
            "/courseworks/{id}/submissions",
            get(list_submissions).post(submit),
        )
        .route("/courseworks/{id}/log", get(coursework_log))
        .route("/courseworks/{id}/log/{student}", get(learner_log))
        .route("/courseworks/{id}/threads", get(export_threads))
        .route("/submissions/{id}/files", get(submission_files))
        .route("/submissions/{id}/files/{*path}", get(submission_file))
        .route("/runs", get(list_runs).post(request_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/comments", post(post_comment))
        .route("/comments/{id}", patch(edit_comment));
    Router::new()
        .route("/healthz", get(healthz))
        .nest("/api/v1", v1)
        .fallback(|| async { ApiError::not_found("endpoint") })
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(platform)
}

/// Runs blocking platform work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(ApiError::internal)?
}

fn parse_json<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// The authenticated caller and their bearer token.
pub struct Caller {
    pub user: User,
    pub token: String,
}

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(
        parts: &mut Parts,
        state: &AppState,
    ) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(|t| t.trim().to_owned())
            .filter(|t| !t.is_empty())
            .ok_or_else(ApiError::unauthenticated)?;
        let platform = state.clone();
        let t = token.clone();
        let user = blocking(move || platform.authenticate(&t)).await?;
        Ok(Caller { user, token })
    }
}

/// `?mine`, `?peers` style flags, or `?filter=mine`.
fn flag_filter<T: DeserializeOwned>(query: &HashMap<String, String>, default: T) -> ApiResult<T> {
    let name = match query.get("filter") {
        Some(v) => v.clone(),
        None => match query
            .keys()
            .find(|k| k.as_str() != "coursework" && k.as_str() != "format")
        {
            Some(k) => k.clone(),
            None => return Ok(default),
        },
    };
    serde_json::from_value(serde_json::Value::String(name.clone()))
        .map_err(|_| ApiError::bad_request(format!("unknown filter `{name}`")))
}

fn wants_tsv(query: &HashMap<String, String>, headers: &HeaderMap) -> bool {
    query.get("format").map(String::as_str) == Some("tsv")
        || headers
            .get(header::ACCEPT)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|a| a.contains("text/tab-separated-values"))
}

fn raw(content_type: &str, bytes: Vec<u8>) -> Response {
    (
        [
            (
                header::CONTENT_TYPE,
                HeaderValue::from_str(content_type).expect("static content type"),
            ),
            (
                header::X_CONTENT_TYPE_OPTIONS,
                HeaderValue::from_static("nosniff"),
            ),
        ],
        bytes,
    )
        .into_response()
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
}

async fn healthz(State(p): State<AppState>) -> Response {
    let ok = tokio::task::spawn_blocking(move || p.storage_healthy())
        .await
        .unwrap_or(false);
    if ok {
        Json(Health { status: "ok" }).into_response()
    } else {
        (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "storage unavailable",
            }),
        )
            .into_response()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Credentials {
    username: String,
    password: String,
}

async fn login(State(p): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let c: Credentials = parse_json(&body)?;
    let session = blocking(move || p.login(&c.username, &c.password)).await?;
    Ok(Json(session).into_response())
}

async fn logout(State(p): State<AppState>, caller: Caller) -> ApiResult<StatusCode> {
    blocking(move || p.logout(&caller.token)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn me(caller: Caller) -> Json<UserView> {
    Json(UserView::from(&caller.user))
}

async fn list_courseworks(
    State(p): State<AppState>,
    caller: Caller,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    if let Some(title) = q.get("title").cloned() {
        let found = blocking(move || p.find_coursework_by_title(&caller.user, &title)).await?;
        return Ok(Json(found.into_iter().collect::<Vec<_>>()).into_response());
    }
    Ok(Json(blocking(move || p.list_courseworks(&caller.user)).await?).into_response())
}

async fn create_coursework(
    State(p): State<AppState>,
    caller: Caller,
    body: Bytes,
) -> ApiResult<Response> {
    let req: NewCoursework = parse_json(&body)?;
    let view = blocking(move || p.create_coursework(&caller.user, req)).await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_coursework(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let view = blocking(move || p.get_coursework(&caller.user, &CourseworkId(id))).await?;
    Ok(Json(view).into_response())
}

async fn update_coursework(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let patch: CourseworkPatch = parse_json(&body)?;
    let view =
        blocking(move || p.update_coursework(&caller.user, &CourseworkId(id), patch)).await?;
    Ok(Json(view).into_response())
}

async fn spec_document(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let (file, bytes) = blocking(move || p.spec_document(&caller.user, &CourseworkId(id))).await?;
    let mut resp = raw("application/octet-stream", bytes);
    let disposition = format!(
        "attachment; filename=\"{}\"",
        file.path
            .rsplit('/')
            .next()
            .unwrap_or("spec")
            .replace('"', "")
    );
    if let Ok(v) = HeaderValue::from_str(&disposition) {
        resp.headers_mut().insert(header::CONTENT_DISPOSITION, v);
    }
    Ok(resp)
}

async fn advance(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let view = blocking(move || p.advance(&caller.user, &CourseworkId(id))).await?;
    Ok(Json(view).into_response())
}

async fn enroll(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: EnrollRequest = parse_json(&body)?;
    let result = blocking(move || p.enroll(&caller.user, &CourseworkId(id), req)).await?;
    let status = if result.already_enrolled {
        StatusCode::OK
    } else {
        StatusCode::CREATED
    };
    Ok((status, Json(result)).into_response())
}

async fn get_groups(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let view = blocking(move || p.get_groups(&caller.user, &CourseworkId(id))).await?;
    Ok(Json(view).into_response())
}

async fn set_groups(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: GroupRequest = parse_json(&body)?;
    let view = blocking(move || p.set_groups(&caller.user, &CourseworkId(id), req)).await?;
    Ok(Json(view).into_response())
}

async fn list_submissions(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let filter = flag_filter(&q, SubmissionFilter::All)?;
    let subs =
        blocking(move || p.list_submissions(&caller.user, &CourseworkId(id), filter)).await?;
    Ok(Json(subs).into_response())
}

/// Multipart upload: a `kind` field, an optional `name` field, and one part
/// per file whose filename is the file's relative path.
async fn submit(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    mut form: Multipart,
) -> ApiResult<Response> {
    let bad = |e: axum::extract::multipart::MultipartError| {
        ApiError::bad_request(format!("malformed upload: {e}"))
    };
    let mut kind = None;
    let mut name = None;
    let mut files = Vec::new();
    while let Some(field) = form.next_field().await.map_err(bad)? {
        let field_name = field.name().unwrap_or_default().to_owned();
        match (field_name.as_str(), field.file_name().map(str::to_owned)) {
            ("kind", None) => kind = Some(field.text().await.map_err(bad)?),
            ("name", None) => name = Some(field.text().await.map_err(bad)?),
            (_, Some(path)) => files.push((path, field.bytes().await.map_err(bad)?.to_vec())),
            (other, None) => {
                return Err(ApiError::bad_request(format!(
                    "unexpected form field `{other}`"
                )))
            }
        }
    }
    let kind: SubmissionKind = kind
        .ok_or_else(|| ApiError::bad_request("the `kind` field is required"))?
        .trim()
        .parse()?;
    let upload = Upload { kind, name, files };
    let view = blocking(move || p.submit(&caller.user, &CourseworkId(id), upload)).await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn submission_files(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let view = blocking(move || p.submission_files(&caller.user, &SubmissionId(id))).await?;
    Ok(Json(view).into_response())
}

async fn submission_file(
    State(p): State<AppState>,
    caller: Caller,
    Path((id, path)): Path<(String, String)>,
) -> ApiResult<Response> {
    let (_, bytes) =
        blocking(move || p.submission_file(&caller.user, &SubmissionId(id), &path)).await?;
    Ok(raw("application/octet-stream", bytes))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRequest {
    suite_id: String,
    target_id: String,
}

async fn request_run(
    State(p): State<AppState>,
    caller: Caller,
    body: Bytes,
) -> ApiResult<Response> {
    let req: RunRequest = parse_json(&body)?;
    let view = blocking(move || {
        p.request_run(
            &caller.user,
            &SubmissionId(req.suite_id),
            &SubmissionId(req.target_id),
        )
    })
    .await?;
    let status = if view.memoized {
        StatusCode::OK
    } else {
        StatusCode::ACCEPTED
    };
    Ok((status, Json(view)).into_response())
}

async fn list_runs(
    State(p): State<AppState>,
    caller: Caller,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let filter = flag_filter(&q, RunFilter::Mine)?;
    let cw = q.get("coursework").cloned().map(CourseworkId);
    let runs = blocking(move || p.list_runs(&caller.user, cw.as_ref(), filter)).await?;
    Ok(Json(runs).into_response())
}

async fn get_run(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let view = blocking(move || p.get_run(&caller.user, &RunId(id))).await?;
    Ok(Json(view).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CommentBody {
    body: String,
}

async fn post_comment(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let c: CommentBody = parse_json(&body)?;
    let view = blocking(move || p.post_comment(&caller.user, &RunId(id), &c.body)).await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn edit_comment(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let c: CommentBody = parse_json(&body)?;
    let view = blocking(move || p.edit_comment(&caller.user, &CommentId(id), &c.body)).await?;
    Ok(Json(view).into_response())
}

async fn learner_log(
    State(p): State<AppState>,
    caller: Caller,
    Path((id, student)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let entries =
        blocking(move || p.learner_log(&caller.user, &CourseworkId(id), &student)).await?;
    if wants_tsv(&q, &headers) {
        let events: Vec<_> = entries.into_iter().map(|e| e.event).collect();
        return Ok(raw(
            "text/tab-separated-values; charset=utf-8",
            export_tsv(&events).into_bytes(),
        ));
    }
    Ok(Json(entries).into_response())
}

async fn coursework_log(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let events = blocking(move || p.coursework_log(&caller.user, &CourseworkId(id))).await?;
    if wants_tsv(&q, &headers) {
        return Ok(raw(
            "text/tab-separated-values; charset=utf-8",
            export_tsv(&events).into_bytes(),
        ));
    }
    Ok(Json(events).into_response())
}

async fn export_threads(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let export = blocking(move || p.export_threads(&caller.user, &CourseworkId(id))).await?;
    if q.get("format").map(String::as_str) == Some("text") {
        return Ok(raw("text/plain; charset=utf-8", export.text.into_bytes()));
    }
    Ok(Json(export).into_response())
}
