use thiserror::Error;

pub type Result<T, E = TryOnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TryOnError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerically degenerate MLS system at query ({x}, {y})")]
    Degenerate { x: f64, y: f64 },

    #[error("empty masked region on the {side} side")]
    EmptyRegion { side: &'static str },

    #[error(
        "insufficient correspondences: found {found}, need at least 3; \
         try enlarging the person or garment masks"
    )]
    InsufficientCorrespondences { found: usize },

    #[error("backend capability error: {0}")]
    Capability(String),

    #[error("cannot step below timestep 0")]
    StepUnderflow,

    #[error("wire protocol error: {0}")]
    Protocol(String),

    #[error("remote backend error {code}: {message}")]
    Remote { code: u16, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<TryOnError>,
    },
}

impl TryOnError {
    pub fn argument(msg: impl Into<String>) -> Self {
        TryOnError::Argument(msg.into())
    }

    pub fn capability(msg: impl Into<String>) -> Self {
        TryOnError::Capability(msg.into())
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &TryOnError {
        match self {
            TryOnError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            TryOnError::Argument(_) | TryOnError::EmptyRegion { .. } => 2,
            TryOnError::InsufficientCorrespondences { .. } => 3,
            TryOnError::Capability(_) | TryOnError::Protocol(_) | TryOnError::Remote { .. } => 4,
            _ => 1,
        }
    }
}

/// Attaches a pipeline stage name to errors.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| TryOnError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
