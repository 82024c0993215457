//! Training: datasets, the two-stage loop, checkpoints and gradient checks.

pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod gradcheck;

pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, CheckpointMeta, FORMAT_VERSION};
pub use data::{speaker_vocabulary, train_tokenizer, Dataset, EmbeddingSource, Example, Utterance};
pub use engine::{batch_loss, train, BatchLoss, MetricRecord, Stage, Trainer};
pub use gradcheck::{grad_check, relative_error, sample_coords, GradCheckReport};
