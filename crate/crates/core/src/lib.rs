//! Speaker description language models: a frozen speaker encoder feeds a
//! trainable prefix mapper whose output, together with a text prompt,
//! conditions a causal language model that writes a description of the
//! speaker.

pub mod audio;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lm;
pub mod loss;
pub mod mapper;
pub mod model;
pub mod nn;
pub mod params;
pub mod speaker_head;
pub mod synth;
pub mod tears;
pub mod tokenizer;
pub mod train;

pub use audio::{log_mel, AugmentationPolicy, MelSpectrogram, Waveform};
pub use config::{Ablation, Config, TrainingConfig};
pub use encoder::{EncoderSpec, ReferenceEncoder, SpeakerEmbedding, SpeakerEncoder, EMBEDDING_DIM};
pub use error::{Error, Result};
pub use eval::{AttributeSchema, EvalReport, SemanticScorer, TokenF1, UNPARSEABLE};
pub use lm::{AssembledPrefix, CausalLm, DecodingConfig, DecodingStrategy, LmConfig};
pub use mapper::{AttentionRecord, MapperConfig, MapperVariant, PrefixMapper, PrefixSequence, AUDIO_PREFIX_LEN};
pub use model::SpeakerLm;
pub use params::ParamStore;
pub use speaker_head::SpeakerHead;
pub use tears::{CorpusStats, Triplet, UtteranceMeta};
pub use tokenizer::BpeTokenizer;

pub use candle::DType;
