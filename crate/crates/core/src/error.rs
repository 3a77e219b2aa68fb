use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("fully masked softmax row {row}")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("invalid mask spec: {0}")]
    InvalidMaskSpec(String),

    #[error("chunk ordinal {n} out of range for {total_frames} frames")]
    ChunkOutOfRange { n: usize, total_frames: usize },

    #[error("blank token in predictor input at position {pos}")]
    BlankInInput { pos: usize },

    #[error("transducer instance too large for brute force: T={t}, U={u}")]
    BruteForceTooLarge { t: usize, u: usize },

    #[error("stream already finalized")]
    StreamFinalized,

    #[error("chunk of {got} frames exceeds configured chunk size {chunk_frames}")]
    OversizeChunk { got: usize, chunk_frames: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("wav error in field {field}: {detail}")]
    Wav { field: &'static str, detail: String },

    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("ref/hyp list length mismatch: {refs} refs vs {hyps} hyps")]
    WerLengthMismatch { refs: usize, hyps: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
