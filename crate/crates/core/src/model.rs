//! The assembled model: prefix mapper, speaker head and language model
//! sharing one parameter store, plus the tokenizer and speaker table.

use candle::{DType, Device, Tensor};

use crate::config::Config;
use crate::encoder::SpeakerEmbedding;
use crate::error::{Error, Result};
use crate::lm::{AssembledPrefix, CausalLm, DecodingConfig, Generation};
use crate::mapper::PrefixMapper;
use crate::params::ParamStore;
use crate::speaker_head::{first_prefix_vector, SpeakerHead};
use crate::tokenizer::BpeTokenizer;

pub const MAPPER_PREFIX: &str = "mapper";
pub const HEAD_PREFIX: &str = "head";
pub const LM_PREFIX: &str = "lm";

#[derive(Debug)]
pub struct SpeakerLm {
    pub store: ParamStore,
    pub mapper: PrefixMapper,
    pub head: SpeakerHead,
    pub lm: CausalLm,
    pub tokenizer: BpeTokenizer,
    /// Class index -> speaker id for the speaker head.
    pub speakers: Vec<String>,
    config: Config,
}

impl SpeakerLm {
    pub fn new(config: &Config, tokenizer: BpeTokenizer, speakers: Vec<String>, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mapper = PrefixMapper::new(&mut store, MAPPER_PREFIX, &config.mapper)?;
        let head = SpeakerHead::new(&mut store, HEAD_PREFIX, config.mapper.width, speakers.len(), config.training.seed)?;
        let lm = CausalLm::new(&mut store, LM_PREFIX, &config.lm, tokenizer.vocab_size(), tokenizer.eos_id())?;
        Ok(Self {
            store,
            mapper,
            head,
            lm,
            tokenizer,
            speakers,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Embeddings `(B, 1024)` in the model dtype.
    pub fn embedding_batch(&self, embs: &[&SpeakerEmbedding]) -> Result<Tensor> {
        self.mapper.embeddings_tensor(embs, self.device())
    }

    /// Audio prefixes `(B, 40, W)`.
    pub fn audio_prefix(&self, embs: &[&SpeakerEmbedding]) -> Result<Tensor> {
        self.mapper.forward(&self.embedding_batch(embs)?)
    }

    pub fn assemble(&self, emb: &SpeakerEmbedding, prompt: &str) -> Result<AssembledPrefix> {
        let audio = self.audio_prefix(&[emb])?;
        self.lm.assemble_prefix(&audio, &[self.tokenizer.encode(prompt)])
    }

    pub fn generate_tokens(&self, emb: &SpeakerEmbedding, prompt: &str, decoding: &DecodingConfig) -> Result<Generation> {
        let prefix = self.assemble(emb, prompt)?;
        self.lm.generate(&prefix.embeddings, decoding)
    }

    pub fn describe(&self, emb: &SpeakerEmbedding, prompt: &str, decoding: &DecodingConfig) -> Result<String> {
        let g = self.generate_tokens(emb, prompt, decoding)?;
        self.tokenizer.decode(&g.tokens)
    }

    /// First prefix vector of each embedding, widened to f64.
    pub fn first_prefix_vectors(&self, embs: &[&SpeakerEmbedding]) -> Result<Vec<Vec<f64>>> {
        let first = first_prefix_vector(&self.audio_prefix(embs)?)?;
        Ok(first.to_dtype(DType::F64)?.to_vec2()?)
    }

    /// Speaker-head probabilities for each embedding.
    pub fn speaker_probabilities(&self, embs: &[&SpeakerEmbedding]) -> Result<Vec<Vec<f64>>> {
        let first = first_prefix_vector(&self.audio_prefix(embs)?)?;
        Ok(self.head.classify(&first)?.to_dtype(DType::F64)?.to_vec2()?)
    }

    pub fn speaker_index(&self, id: &str) -> Result<u32> {
        self.speakers
            .iter()
            .position(|s| s == id)
            .map(|i| i as u32)
            .ok_or_else(|| Error::Data(format!("speaker {id:?} is not in the training vocabulary")))
    }
}
