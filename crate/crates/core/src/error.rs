use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("lambda_s must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("class {0} has zero relative frequency")]
    ZeroFrequencyClass(u16),
    #[error("class {0} is not in the class table")]
    UnknownClass(u16),
    #[error("no pose for frame {0}")]
    MissingPose(u32),
    #[error("no morphology kernel for class {0}")]
    MissingKernel(u16),
    #[error("class {0} has no vertical/flat grouping")]
    UnmappedClass(u16),
    #[error("crop out of bounds: {0}")]
    CropOutOfBounds(String),
    #[error("no valid pixels for the loss")]
    NoValidPixels,
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("infeasible scene spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("frame mismatch: {0}")]
    FrameMismatch(String),
    #[error("no frames to process")]
    NoFrames,
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            message: message.to_string(),
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonPositiveDepth(_) => "NonPositiveDepth",
            Error::DegenerateConfiguration(_) => "DegenerateConfiguration",
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::InvalidCamera(_) => "InvalidCamera",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonPositiveLambda(_) => "NonPositiveLambda",
            Error::ZeroFrequencyClass(_) => "ZeroFrequencyClass",
            Error::UnknownClass(_) => "UnknownClass",
            Error::MissingPose(_) => "MissingPose",
            Error::MissingKernel(_) => "MissingKernel",
            Error::UnmappedClass(_) => "UnmappedClass",
            Error::CropOutOfBounds(_) => "CropOutOfBounds",
            Error::NoValidPixels => "NoValidPixels",
            Error::GridMismatch(_) => "GridMismatch",
            Error::InfeasibleSpec(_) => "InfeasibleSpec",
            Error::InvalidInput(_) => "InvalidInput",
            Error::MissingInput(_) => "MissingInput",
            Error::FrameMismatch(_) => "FrameMismatch",
            Error::NoFrames => "NoFrames",
            Error::Invariant(_) => "Invariant",
            Error::Io { .. } => "Io",
            Error::Parse { .. } => "Parse",
        }
    }

    /// Process exit code for this error: 2 input, 3 validation, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::MissingInput(_)
            | Error::InvalidInput(_)
            | Error::NoFrames
            | Error::FrameMismatch(_)
            | Error::MissingPose(_) => 2,
            Error::Invariant(_) => 4,
            _ => 3,
        }
    }
}
