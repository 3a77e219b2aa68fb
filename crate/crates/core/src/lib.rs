//! Streaming transducer speech recognizer with chunked self-attention.
//!
//! The encoder attends within fixed-size chunks plus a bounded number of
//! left-context chunks and optional attention-sink frames; decoding can run
//! either offline over a whole utterance or incrementally over pushed audio,
//! and the two paths produce the same numbers by construction.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod mask;
pub mod model;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod trainer;
pub mod transducer;

pub use data::{
    gen_synthetic, read_manifest, synthetic_vocab, ManifestEntry, SyntheticTaskConfig,
    SyntheticUtterance,
};
pub use encoder::{EncoderConfig, EncoderParams, StreamState};
pub use error::{Error, Result};
pub use eval::{cost_report, frames_to_ms, wer, CostReport, WerReport};
pub use frontend::{FrontEndConfig, FrontEndParams};
pub use mask::{
    allowed, attended_count, build_mask, chunk_index, BoolMask, LeftContext, MaskGeometry,
    MaskSpec,
};
pub use model::{Model, ModelConfig, TrainInput};
pub use rng::{RngSnapshot, Streams};
pub use search::{
    beam_search, decode_offline, decode_offline_audio, greedy_decode, stream_open, DecodeConfig,
    Hypothesis, Session, StreamReport,
};
pub use tensor::{Dtype, Scalar, Tensor};
pub use trainer::{
    eval_nll, load_checkpoint, lr_at, save_checkpoint, train, train_epoch, CheckpointMeta,
    EpochMetrics, OptimState, TrainConfig, TrainItem, TrainingMode,
};
pub use transducer::{
    rnnt_loss, rnnt_loss_bruteforce, JoinerConfig, JoinerParams, PredictorConfig,
    PredictorParams, Vocab, BLANK,
};
