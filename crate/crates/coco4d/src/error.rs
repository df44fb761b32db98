use thiserror::Error;

pub type Result<T> = std::result::Result<T, CocoError>;

/// Error type shared across the whole pipeline.
#[derive(Debug, Error)]
pub enum CocoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("point behind camera (depth {depth} <= near {near})")]
    BehindCamera { depth: f64, near: f64 },

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("operation not applicable: {0}")]
    NotApplicable(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate depth: {0}")]
    DegenerateDepth(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("no foreground found in frame {frame}")]
    MissingForeground { frame: usize },

    #[error("optimization diverged at iteration {iteration} ({context})")]
    Diverged { iteration: usize, context: String },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CocoError>,
    },

    #[error("load error: {0}")]
    Load(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl CocoError {
    pub fn in_stage(self, stage: &str) -> CocoError {
        CocoError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
