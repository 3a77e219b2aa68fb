//! Dataset ingestion and persistence: JSONL manifests, PCM16 WAV audio,
//! a deterministic synthetic ASR task, and the named-tensor container used
//! for checkpoints and feature files.

pub mod container;
pub mod manifest;
pub mod synthetic;
pub mod wav;

pub use container::{read_container, read_feature_file, write_container, write_feature_file};
pub use manifest::{read_manifest, ManifestEntry};
pub use synthetic::{gen_synthetic, synthetic_vocab, SyntheticTaskConfig, SyntheticUtterance};
pub use wav::{read_wav, write_wav};
