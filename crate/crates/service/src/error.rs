use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use refrank_core::afs::AfsError;
use refrank_core::session::SessionError;
use serde::{Deserialize, Serialize};

/// Error body returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    pub fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let message = e.to_string();
        let (status, code) = match e {
            SessionError::UnknownQuery(_) => (StatusCode::NOT_FOUND, "unknown_query"),
            SessionError::InvalidParams(_) => (StatusCode::BAD_REQUEST, "invalid_params"),
            SessionError::Unavailable { .. } => (StatusCode::CONFLICT, "strategy_unavailable"),
            SessionError::PoolExhausted(_) => (StatusCode::CONFLICT, "pool_exhausted"),
            SessionError::Feedback(_) | SessionError::Afs(AfsError::PatchOutOfRange { .. }) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_feedback")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self { status, code, message }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code.to_string(), message: self.message };
        (self.status, Json(body)).into_response()
    }
}
