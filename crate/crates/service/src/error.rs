use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use flim_core::{FlimError, ValidationIssue};
use serde::Serialize;

/// JSON error body: `{"error": "...", "issues": [...]}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub issues: Vec<ValidationIssue>,
}

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    issues: &'a [ValidationIssue],
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            issues: Vec::new(),
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<FlimError> for ApiError {
    fn from(e: FlimError) -> Self {
        let message = e.to_string();
        let status = match &e {
            FlimError::Validation(issues) => {
                return ApiError {
                    status: StatusCode::UNPROCESSABLE_ENTITY,
                    message: "validation failed".into(),
                    issues: issues.clone(),
                }
            }
            FlimError::InvalidSpec(_) | FlimError::EmptySelection | FlimError::Domain(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            FlimError::Image { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            FlimError::LayerOutOfRange { .. } => StatusCode::NOT_FOUND,
            FlimError::EmptyMarkers | FlimError::EmptyDataset => StatusCode::CONFLICT,
            FlimError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                StatusCode::NOT_FOUND
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}", self.message);
        }
        let body = Body {
            error: &self.message,
            issues: &self.issues,
        };
        (self.status, Json(body)).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
