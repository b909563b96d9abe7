use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use proseco_api::{ErrorBody, ErrorKind};

/// Error carried to the client as `{kind, message}` JSON.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: ErrorKind, message: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { kind, message: message.into() } }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, ErrorKind::NotFound, message)
    }

    pub fn contract(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, ErrorKind::Contract, message)
    }
}

pub fn error_body(e: &proseco_core::Error) -> ErrorBody {
    let kind = match e.kind() {
        proseco_core::ErrorKind::Contract => ErrorKind::Contract,
        proseco_core::ErrorKind::Config => ErrorKind::Config,
        proseco_core::ErrorKind::Io => ErrorKind::Io,
        proseco_core::ErrorKind::Format => ErrorKind::Format,
    };
    ErrorBody { kind, message: e.to_string() }
}

impl From<proseco_core::Error> for ApiError {
    fn from(e: proseco_core::Error) -> Self {
        let body = error_body(&e);
        let status = match body.kind {
            ErrorKind::Config => StatusCode::BAD_REQUEST,
            ErrorKind::Io if io_not_found(&e) => StatusCode::NOT_FOUND,
            ErrorKind::Io => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError { status, body }
    }
}

fn io_not_found(e: &proseco_core::Error) -> bool {
    match e {
        proseco_core::Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
        proseco_core::Error::AtStep { source, .. } => io_not_found(source),
        _ => false,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
