use crate::data::DataError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid tap selection: {0}")]
    Taps(String),
    #[error("sequence of {len} positions exceeds the maximum of {max}")]
    SequenceOverflow { len: usize, max: usize },
    #[error("caption of {len} tokens exceeds the DeepLens budget of {max}")]
    CaptionTooLong { len: usize, max: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenIdOutOfRange { id: usize, vocab: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("refinement needs a non-empty input caption")]
    EmptyCaption,
    #[error("{requested} refinement iterations requested, maximum is {max}")]
    TooManyIterations { requested: usize, max: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} diverged at step {step}: {detail}")]
    Diverged { stage: u8, step: usize, detail: String },
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Numerics(_) => "numerics",
            Error::Data(_) => "data",
            Error::InvalidImage(_) => "invalid_image",
            Error::Taps(_) => "taps",
            Error::SequenceOverflow { .. } => "sequence_overflow",
            Error::CaptionTooLong { .. } => "caption_too_long",
            Error::UnknownToken(_) => "unknown_token",
            Error::TokenIdOutOfRange { .. } => "token_id_out_of_range",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::EmptyCaption => "empty_caption",
            Error::TooManyIterations { .. } => "too_many_iterations",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::MissingPrerequisite(_) => "missing_prerequisite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
