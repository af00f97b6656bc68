use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlimError {
    /// A precondition on shapes, indices or parameters was violated.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),

    #[error("no marker pixels available")]
    EmptyMarkers,

    #[error("empty patch dataset")]
    EmptyDataset,

    #[error("kernel selection must not be empty")]
    EmptySelection,

    #[error("layer index {index} out of range (model has {layers} layers)")]
    LayerOutOfRange { index: usize, layers: usize },

    #[error("no ground-truth boxes: recall is undefined")]
    NoGroundTruth,

    #[error("project validation failed:\n{}", format_issues(.0))]
    Validation(Vec<ValidationIssue>),

    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("model weights corrupted: {0}")]
    Checksum(String),

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl FlimError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlimError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        FlimError::Domain(msg.into())
    }
}

/// One problem found while validating a project directory.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    MalformedJson {
        file: String,
        message: String,
    },
    UnreadableImage {
        file: String,
        message: String,
    },
    DanglingImage {
        file: String,
        image_id: String,
    },
    ImageIdMismatch {
        file: String,
        image_id: String,
    },
    PixelOutOfBounds {
        image_id: String,
        marker_id: u32,
        row: u32,
        col: u32,
        height: u32,
        width: u32,
    },
    DuplicateMarkerId {
        image_id: String,
        marker_id: u32,
    },
    EmptyMarker {
        image_id: String,
        marker_id: u32,
    },
    DuplicatePixel {
        image_id: String,
        marker_id: u32,
        row: u32,
        col: u32,
    },
    InvalidBox {
        image_id: String,
        index: usize,
        message: String,
    },
}

impl ValidationIssue {
    /// File (relative to the project root) the issue was found in.
    pub fn file(&self) -> String {
        match self {
            ValidationIssue::MalformedJson { file, .. }
            | ValidationIssue::UnreadableImage { file, .. }
            | ValidationIssue::DanglingImage { file, .. }
            | ValidationIssue::ImageIdMismatch { file, .. } => file.clone(),
            ValidationIssue::PixelOutOfBounds { image_id, .. }
            | ValidationIssue::DuplicateMarkerId { image_id, .. }
            | ValidationIssue::EmptyMarker { image_id, .. }
            | ValidationIssue::DuplicatePixel { image_id, .. } => {
                format!("markers/{image_id}.json")
            }
            ValidationIssue::InvalidBox { image_id, .. } => format!("gt/{image_id}.json"),
        }
    }
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::MalformedJson { file, message } => {
                write!(f, "{file}: malformed JSON: {message}")
            }
            ValidationIssue::UnreadableImage { file, message } => {
                write!(f, "{file}: unreadable image: {message}")
            }
            ValidationIssue::DanglingImage { file, image_id } => {
                write!(f, "{file}: references missing image '{image_id}'")
            }
            ValidationIssue::ImageIdMismatch { file, image_id } => {
                write!(f, "{file}: declares image_id '{image_id}' which does not match the file name")
            }
            ValidationIssue::PixelOutOfBounds {
                image_id,
                marker_id,
                row,
                col,
                height,
                width,
            } => write!(
                f,
                "image '{image_id}' marker {marker_id}: pixel ({row},{col}) outside {height}x{width}"
            ),
            ValidationIssue::DuplicateMarkerId {
                image_id,
                marker_id,
            } => write!(f, "image '{image_id}': duplicate marker id {marker_id}"),
            ValidationIssue::EmptyMarker {
                image_id,
                marker_id,
            } => write!(f, "image '{image_id}' marker {marker_id}: no pixels"),
            ValidationIssue::DuplicatePixel {
                image_id,
                marker_id,
                row,
                col,
            } => write!(
                f,
                "image '{image_id}' marker {marker_id}: pixel ({row},{col}) listed twice"
            ),
            ValidationIssue::InvalidBox {
                image_id,
                index,
                message,
            } => write!(f, "image '{image_id}' box {index}: {message}"),
        }
    }
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}
