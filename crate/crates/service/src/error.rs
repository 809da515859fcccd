use std::path::{Path, PathBuf};

use compass_core::CompassError;
use serde::Serialize;
use thiserror::Error;

use crate::jobs::JobStatus;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] CompassError),
    #[error("journal error: {0}")]
    Journal(String),
    #[error("job {id}: illegal transition {from:?} -> {to:?}")]
    Transition { id: String, from: JobStatus, to: JobStatus },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

impl ServiceError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        ServiceError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Core(e) => e.kind(),
            ServiceError::Journal(_) => "journal",
            ServiceError::Transition { .. } => "transition",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Io { .. } => "io",
            ServiceError::Serde(_) => "serialization",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// `{"error": {"kind", "message", "fields"?}}`, shared by the CLI and the
/// HTTP service.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

impl ErrorBody {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            fields: Vec::new(),
        }
    }

    /// Field-level errors from `"path: message"` strings, each path
    /// prefixed with `prefix`.
    pub fn validation(prefix: &str, problems: &[String]) -> Self {
        let fields = problems
            .iter()
            .map(|p| {
                let (field, message) = p.split_once(": ").unwrap_or(("", p.as_str()));
                let field = match (prefix.is_empty(), field.is_empty()) {
                    (true, _) => field.to_string(),
                    (false, true) => prefix.to_string(),
                    (false, false) => format!("{prefix}.{field}"),
                };
                FieldError {
                    field,
                    message: message.to_string(),
                }
            })
            .collect::<Vec<_>>();
        let message = fields
            .iter()
            .map(|f| format!("{}: {}", f.field, f.message))
            .collect::<Vec<_>>()
            .join("; ");
        Self {
            kind: "validation".into(),
            message,
            fields,
        }
    }

    pub fn from_core(prefix: &str, e: &CompassError) -> Self {
        match e {
            CompassError::Validation(p) => Self::validation(prefix, p),
            other => Self::new(other.kind(), other.to_string()),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": self })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_paths_are_prefixed() {
        let b = ErrorBody::validation(
            "request",
            &["objects[0].theta: expected an angle".into(), "no path here".into()],
        );
        assert_eq!(b.fields[0].field, "request.objects[0].theta");
        assert_eq!(b.fields[0].message, "expected an angle");
        assert_eq!(b.fields[1].field, "request");
        assert_eq!(
            b.to_json()["error"]["message"],
            "request.objects[0].theta: expected an angle; request: no path here"
        );
    }
}
