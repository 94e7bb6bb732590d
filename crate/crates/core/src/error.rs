use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema has no keypoints")]
    EmptySchema,
    #[error("keypoint {0} has an empty name")]
    EmptyName(usize),
    #[error("duplicate keypoint name {0:?}")]
    DuplicateName(String),
    #[error("unknown keypoint {0:?}")]
    UnknownKeypoint(String),
    #[error("symmetric pair index {index} out of range for {n} keypoints")]
    PairIndexOutOfRange { index: usize, n: usize },
    #[error("keypoint {0} is paired with itself")]
    SelfPair(usize),
    #[error("keypoint {0:?} appears in more than one symmetric pair")]
    KeypointInTwoPairs(String),

    #[error("degenerate keypoint pair: distance {distance} is below the minimum")]
    DegeneratePair { distance: f64 },
    #[error("patch size {width}x{height} is not 2:1")]
    BadAspect { width: u32, height: u32 },

    #[error("pose tensor channel {channel} has zero area")]
    EmptyTensor { channel: usize },
    #[error("pose tensor channel {channel} holds a negative or non-finite value at cell {cell}")]
    InvalidTensorValue { channel: usize, cell: usize },

    #[error("image ids do not match: {0}")]
    MismatchedIds(String),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("empty patch subset")]
    EmptySubset,
    #[error("patch index {index} out of range for {n} patches")]
    PatchOutOfRange { index: usize, n: usize },
    #[error("{count} candidate subsets exceed the cap of {cap}")]
    TooLarge { count: u128, cap: u128 },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {reason}")]
    MalformedLine {
        file: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("inconsistent dataset: {0}")]
    InconsistentCounts(String),
    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by arguments or data that parse fine but break
    /// a constraint, as opposed to unreadable or malformed input.
    pub fn is_constraint_violation(&self) -> bool {
        matches!(
            self,
            Error::EmptySchema
                | Error::EmptyName(_)
                | Error::DuplicateName(_)
                | Error::PairIndexOutOfRange { .. }
                | Error::SelfPair(_)
                | Error::KeypointInTwoPairs(_)
                | Error::DegeneratePair { .. }
                | Error::BadAspect { .. }
                | Error::EmptySubset
                | Error::PatchOutOfRange { .. }
                | Error::TooLarge { .. }
                | Error::DegenerateSplit(_)
                | Error::InvalidParameter(_)
        )
    }

    pub(crate) fn malformed(
        file: impl Into<PathBuf>,
        line: usize,
        reason: impl Into<String>,
    ) -> Self {
        Error::MalformedLine {
            file: file.into(),
            line,
            reason: reason.into(),
        }
    }
}
