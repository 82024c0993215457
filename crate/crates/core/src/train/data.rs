//! Tokenized training examples and per-epoch speaker embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{apply_policy, load_and_resample, log_mel, AugmentationPolicy, Waveform, TARGET_SAMPLE_RATE};
use crate::encoder::{SpeakerEmbedding, SpeakerEncoder};
use crate::error::{Error, Result};
use crate::tears::Triplet;
use crate::tokenizer::BpeTokenizer;

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    /// Kept when embeddings come from audio, so they can be re-augmented.
    pub audio: Option<Waveform>,
    pub clean: SpeakerEmbedding,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub utterance: usize,
    pub speaker_class: u32,
    pub prompt: Vec<u32>,
    /// Description tokens followed by end-of-text.
    pub target: Vec<u32>,
}

/// Where clean speaker embeddings come from.
pub enum EmbeddingSource<'a> {
    /// Decode `audio_path` (relative paths resolve against `root`) and run
    /// the encoder on its log-mel spectrogram.
    Audio { encoder: &'a dyn SpeakerEncoder, root: PathBuf },
    /// Already decoded 16 kHz audio keyed by utterance id.
    Memory { encoder: &'a dyn SpeakerEncoder, audio: &'a BTreeMap<String, Waveform> },
    /// Precomputed embeddings keyed by utterance id.
    Table(&'a BTreeMap<String, SpeakerEmbedding>),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub examples: Vec<Example>,
}

/// Sorted unique speaker ids; the index is the speaker-head class.
pub fn speaker_vocabulary(triplets: &[Triplet]) -> Vec<String> {
    triplets
        .iter()
        .map(|t| t.speaker_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Byte-level BPE over every prompt and description.
pub fn train_tokenizer(triplets: &[Triplet], merges: usize) -> BpeTokenizer {
    BpeTokenizer::train(
        triplets.iter().flat_map(|t| [t.prompt.as_str(), t.description.as_str()]),
        merges,
    )
}

pub fn resolve_audio(root: &Path, audio_path: &str) -> PathBuf {
    let p = Path::new(audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Embedding of one waveform under an encoder.
pub fn embed_waveform(wav: &Waveform, encoder: &dyn SpeakerEncoder) -> Result<SpeakerEmbedding> {
    encoder.encode(&log_mel(wav)?)
}

impl Dataset {
    pub fn from_triplets(
        triplets: &[Triplet],
        tokenizer: &BpeTokenizer,
        speakers: &[String],
        source: &EmbeddingSource<'_>,
    ) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::Data("training manifest is empty".into()));
        }
        let class: BTreeMap<&str, u32> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut utterances = Vec::new();
        let mut examples = Vec::new();
        for t in triplets {
            let speaker_class = *class
                .get(t.speaker_id.as_str())
                .ok_or_else(|| Error::Data(format!("speaker {:?} missing from the speaker table", t.speaker_id)))?;
            let utterance = match index.get(t.utterance_id.as_str()) {
                Some(&i) => i,
                None => {
                    let (audio, clean) = match source {
                        EmbeddingSource::Audio { encoder, root } => {
                            let wav = load_and_resample(resolve_audio(root, &t.audio_path), TARGET_SAMPLE_RATE)?;
                            let clean = embed_waveform(&wav, *encoder)?;
                            (Some(wav), clean)
                        }
                        EmbeddingSource::Memory { encoder, audio } => {
                            let wav = audio.get(&t.utterance_id).ok_or_else(|| {
                                Error::Data(format!("no audio for utterance {:?}", t.utterance_id))
                            })?;
                            (Some(wav.clone()), embed_waveform(wav, *encoder)?)
                        }
                        EmbeddingSource::Table(table) => {
                            let e = table.get(&t.utterance_id).ok_or_else(|| {
                                Error::Data(format!("no embedding for utterance {:?}", t.utterance_id))
                            })?;
                            (None, e.clone())
                        }
                    };
                    utterances.push(Utterance {
                        id: t.utterance_id.clone(),
                        speaker: t.speaker_id.clone(),
                        audio,
                        clean,
                    });
                    index.insert(&t.utterance_id, utterances.len() - 1);
                    utterances.len() - 1
                }
            };
            let mut target = tokenizer.encode(&t.description);
            target.push(tokenizer.eos_id());
            examples.push(Example {
                utterance,
                speaker_class,
                prompt: tokenizer.encode(&t.prompt),
                target,
            });
        }
        Ok(Self { utterances, examples })
    }

    pub fn clean_embeddings(&self) -> Vec<SpeakerEmbedding> {
        self.utterances.iter().map(|u| u.clean.clone()).collect()
    }

    /// Embeddings for one epoch. With augmentation on, every utterance that
    /// has audio is re-augmented from a stream keyed by (seed, epoch,
    /// utterance) and re-encoded; otherwise the clean embeddings are used.
    pub fn epoch_embeddings(
        &self,
        encoder: Option<&dyn SpeakerEncoder>,
        policy: &AugmentationPolicy,
        augment: bool,
        epoch: usize,
    ) -> Result<Vec<SpeakerEmbedding>> {
        let Some(encoder) = encoder.filter(|_| augment) else {
            return Ok(self.clean_embeddings());
        };
        self.utterances
            .iter()
            .enumerate()
            .map(|(i, u)| match &u.audio {
                Some(wav) => {
                    let (aug, _) = apply_policy(wav, policy, &mut augmentation_rng(policy.seed, epoch, i))?;
                    embed_waveform(&aug, encoder)
                }
                None => Ok(u.clean.clone()),
            })
            .collect()
    }
}

/// Independent random stream for one (epoch, utterance) pair.
pub fn augmentation_rng(seed: u64, epoch: usize, utterance: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | utterance as u64);
    rng
}
