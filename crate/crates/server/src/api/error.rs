use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use g4r_core::model::ValidationErrors;
use g4r_core::{EngineError, StoreError, CAP_REACHED_MESSAGE};
use serde_json::{json, Value};

#[derive(Debug)]
pub enum ApiError {
    /// Same body for every authentication failure.
    Unauthorized,
    Forbidden,
    NotFound,
    Conflict(String),
    CapReached,
    Validation(ValidationErrors),
    Unprocessable { code: &'static str, message: String },
    Rejected { status: StatusCode, message: String },
    TooManyRequests,
    Upstream,
    Internal(String),
}

impl ApiError {
    pub fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        ApiError::Unprocessable {
            code,
            message: message.into(),
        }
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        ApiError::Internal(e.to_string())
    }
}

fn body(code: &str, message: &str) -> Json<Value> {
    Json(json!({ "error": code, "message": message }))
}

fn validation_body(errors: &ValidationErrors) -> Value {
    let list: Vec<Value> = errors
        .0
        .iter()
        .map(|e| {
            let mut v = serde_json::to_value(e).unwrap_or_else(|_| json!({}));
            if let Value::Object(map) = &mut v {
                map.insert("field".into(), e.field().into());
                map.insert("message".into(), e.to_string().into());
            }
            v
        })
        .collect();
    json!({
        "error": "validation_failed",
        "message": errors.to_string(),
        "errors": list,
    })
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::Unauthorized => (
                StatusCode::UNAUTHORIZED,
                body("unauthorized", "missing, invalid or expired credentials"),
            )
                .into_response(),
            ApiError::Forbidden => (
                StatusCode::FORBIDDEN,
                body("forbidden", "this interface belongs to another account"),
            )
                .into_response(),
            ApiError::NotFound => (StatusCode::NOT_FOUND, body("not_found", "not found")).into_response(),
            ApiError::Conflict(message) => {
                (StatusCode::CONFLICT, body("conflict", &message)).into_response()
            }
            ApiError::CapReached => (
                StatusCode::CONFLICT,
                [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
                CAP_REACHED_MESSAGE,
            )
                .into_response(),
            ApiError::Validation(errors) => {
                (StatusCode::UNPROCESSABLE_ENTITY, Json(validation_body(&errors))).into_response()
            }
            ApiError::Unprocessable { code, message } => {
                (StatusCode::UNPROCESSABLE_ENTITY, body(code, &message)).into_response()
            }
            ApiError::Rejected { status, message } => {
                (status, body("bad_request", &message)).into_response()
            }
            ApiError::TooManyRequests => (
                StatusCode::TOO_MANY_REQUESTS,
                body("rate_limited", "too many interfaces created from this address today"),
            )
                .into_response(),
            ApiError::Upstream => (
                StatusCode::BAD_GATEWAY,
                Json(json!({
                    "error": "upstream_failure",
                    "message": "the language model did not answer; please try again",
                    "retryable": true,
                })),
            )
                .into_response(),
            ApiError::Internal(detail) => {
                tracing::error!(%detail, "internal error");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    body("internal", "internal server error"),
                )
                    .into_response()
            }
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound => ApiError::NotFound,
            StoreError::DuplicateEmail => ApiError::Conflict(e.to_string()),
            StoreError::WeakPassword => ApiError::unprocessable("weak_password", e.to_string()),
            StoreError::InvalidEmail => ApiError::unprocessable("invalid_email", e.to_string()),
            StoreError::EmptyParticipantId => {
                ApiError::unprocessable("empty_participant_id", e.to_string())
            }
            StoreError::AuthFailed => ApiError::Unauthorized,
            StoreError::CapReached(_) => ApiError::CapReached,
            other => ApiError::internal(other),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::UnknownInterface | EngineError::UnknownSession => ApiError::NotFound,
            EngineError::EmptyParticipantId => {
                ApiError::unprocessable("empty_participant_id", e.to_string())
            }
            EngineError::EmptyMessage => ApiError::unprocessable("empty_message", e.to_string()),
            EngineError::CapReached => ApiError::CapReached,
            EngineError::Upstream(_) | EngineError::MissingKey(_) => {
                tracing::warn!(error = %e, "upstream failure");
                ApiError::Upstream
            }
            EngineError::Store(s) => s.into(),
        }
    }
}
