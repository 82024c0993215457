//! Fixed speaker encoders and the embedding interchange format.
//!
//! The encoder is frozen: training reads embeddings from it and never writes
//! back. [`ReferenceEncoder`] stands in for a pretrained network in hermetic
//! runs; precomputed embeddings from any other encoder enter through
//! [`load_external_embeddings`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::mel::N_MELS;
use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 1024;

/// A 1024-dimensional speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(Vec<f32>);

impl SpeakerEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Shape(format!(
                "speaker embedding has {} values, expected {EMBEDDING_DIM}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("speaker embedding holds non-finite values".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; EMBEDDING_DIM])
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }
}

/// Maps a log-mel spectrogram to a speaker embedding. Implementations hold
/// no mutable state.
pub trait SpeakerEncoder: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize {
        EMBEDDING_DIM
    }

    /// Always true; the encoder is never updated.
    fn frozen(&self) -> bool {
        true
    }

    fn encode(&self, mel: &MelSpectrogram) -> Result<SpeakerEmbedding>;

    /// Serialized parameters, for checking that nothing mutated them.
    fn state_bytes(&self) -> Vec<u8>;
}

/// Identifies an encoder inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub name: String,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            name: ReferenceEncoder::NAME.into(),
            seed: 0,
        }
    }
}

impl EncoderSpec {
    pub fn build(&self) -> Result<ReferenceEncoder> {
        if self.name != ReferenceEncoder::NAME {
            return Err(Error::Config(format!(
                "unknown encoder {:?}; only {:?} is built in",
                self.name,
                ReferenceEncoder::NAME
            )));
        }
        Ok(ReferenceEncoder::new(self.seed))
    }
}

/// Time-average pooling over frames followed by a fixed, seeded, bias-free
/// linear map 128 -> 1024. Linear in the spectrogram and invariant to frame
/// order.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    seed: u64,
    /// Row-major 1024 x 128.
    weight: Vec<f32>,
}

impl ReferenceEncoder {
    pub const NAME: &'static str = "reference-meanpool-linear";

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (N_MELS as f32).sqrt();
        let weight = (0..EMBEDDING_DIM * N_MELS)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self { seed, weight }
    }

    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec {
            name: Self::NAME.into(),
            seed: self.seed,
        }
    }
}

impl SpeakerEncoder for ReferenceEncoder {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn encode(&self, mel: &MelSpectrogram) -> Result<SpeakerEmbedding> {
        if mel.bins() != N_MELS {
            return Err(Error::Shape(format!(
                "encoder expects {N_MELS} mel channels, got {}",
                mel.bins()
            )));
        }
        if mel.frames() == 0 {
            return Err(Error::Degenerate("spectrogram has no frames".into()));
        }
        let pooled: Vec<f64> = (0..N_MELS)
            .map(|b| mel.channel(b).iter().map(|&v| v as f64).sum::<f64>() / mel.frames() as f64)
            .collect();
        let out = self
            .weight
            .chunks_exact(N_MELS)
            .map(|row| row.iter().zip(&pooled).map(|(&w, &p)| w as f64 * p).sum::<f64>() as f32)
            .collect();
        SpeakerEmbedding::new(out)
    }

    fn state_bytes(&self) -> Vec<u8> {
        self.weight.iter().flat_map(|w| w.to_le_bytes()).collect()
    }
}

/// Reads `utterance_id<TAB>f1 f2 ... f1024` records, one per line. Blank
/// lines are skipped.
pub fn load_external_embeddings(path: impl AsRef<Path>) -> Result<BTreeMap<String, SpeakerEmbedding>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text)
}

pub fn parse_embeddings(text: &str) -> Result<BTreeMap<String, SpeakerEmbedding>> {
    let mut table = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("line {}: missing tab after utterance id", lineno + 1)))?;
        let values = rest
            .split_whitespace()
            .map(|t| t.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
        let emb = SpeakerEmbedding::new(values).map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("line {}: {m}", lineno + 1)),
            other => other,
        })?;
        if table.insert(id.to_string(), emb).is_some() {
            return Err(Error::Data(format!("line {}: duplicate utterance id {id:?}", lineno + 1)));
        }
    }
    Ok(table)
}

pub fn format_embeddings(table: &BTreeMap<String, SpeakerEmbedding>) -> String {
    let mut out = String::new();
    for (id, emb) in table {
        out.push_str(id);
        out.push('\t');
        for (i, v) in emb.values().iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}
