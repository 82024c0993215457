//! Decoder-only causal language model conditioned on injected prefix
//! embeddings.
//!
//! The input sequence is `[40 audio prefix vectors | 10 prompt token
//! embeddings | description tokens]`. Prompts shorter than 10 tokens are
//! left-padded with the end-of-text embedding.

use candle::{DType, Device, IndexOp, Module, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapper::AUDIO_PREFIX_LEN;
use crate::nn::{causal_mask, LayerNorm, TransformerBlock};
use crate::params::ParamStore;

pub const PROMPT_PREFIX_LEN: usize = 10;
pub const TOTAL_PREFIX_LEN: usize = AUDIO_PREFIX_LEN + PROMPT_PREFIX_LEN;

/// Backbone name of the built-in randomly initialised GPT-style model.
pub const TINY_GPT: &str = "tiny-gpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub backbone: String,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_positions: usize,
    /// Merge budget when the BPE tokenizer is trained on the corpus.
    pub bpe_merges: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            backbone: TINY_GPT.into(),
            width: 768,
            layers: 2,
            heads: 12,
            ff_width: 3072,
            max_positions: 256,
            bpe_merges: 1000,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone != TINY_GPT {
            return Err(Error::Config(format!(
                "unknown backbone {:?}; available: {TINY_GPT:?}",
                self.backbone
            )));
        }
        if self.width == 0 || self.layers == 0 || self.ff_width == 0 {
            return Err(Error::Config("lm width, layers and ff_width must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("lm width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.max_positions <= TOTAL_PREFIX_LEN {
            return Err(Error::Config(format!("max_positions must exceed {TOTAL_PREFIX_LEN}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingStrategy {
    Greedy,
    Beam,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodingConfig {
    pub strategy: DecodingStrategy,
    pub max_len: usize,
    pub beam_width: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            strategy: DecodingStrategy::Greedy,
            max_len: 64,
            beam_width: 4,
            top_k: 5,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// The 50-position conditioning prefix for a batch, plus any truncation
/// warnings raised while building it.
#[derive(Debug, Clone)]
pub struct AssembledPrefix {
    pub embeddings: Tensor,
    pub warnings: Vec<String>,
}

/// Tokens produced by [`CausalLm::generate`]; the end-of-text token is not
/// included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// True when generation stopped on end-of-text.
    pub finished: bool,
}

impl Generation {
    /// Number of decoding steps taken, counting the end-of-text token.
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }
}

#[derive(Debug, Clone)]
pub struct CausalLm {
    config: LmConfig,
    vocab_size: usize,
    pad_id: u32,
    token_embedding: Tensor,
    positions: Tensor,
    blocks: Vec<TransformerBlock>,
    ln_final: LayerNorm,
    trainable: bool,
    dtype: DType,
}

impl CausalLm {
    /// `pad_id` doubles as the end-of-text token.
    pub fn new(store: &mut ParamStore, prefix: &str, config: &LmConfig, vocab_size: usize, pad_id: u32) -> Result<Self> {
        config.validate()?;
        if pad_id as usize >= vocab_size {
            return Err(Error::Config(format!("pad id {pad_id} outside vocabulary of {vocab_size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.width;
        let token_embedding = store.uniform(&format!("{prefix}.tokens"), (vocab_size, w), 0.05, &mut rng)?;
        let positions = store.uniform(&format!("{prefix}.positions"), (config.max_positions, w), 0.02, &mut rng)?;
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.blocks.{i}"), w, config.heads, config.ff_width, &mut rng))
            .collect::<Result<_>>()?;
        let ln_final = LayerNorm::new(store, &format!("{prefix}.ln_final"), w)?;
        Ok(Self {
            config: config.clone(),
            vocab_size,
            pad_id,
            token_embedding,
            positions,
            blocks,
            ln_final,
            trainable: true,
            dtype: store.dtype(),
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn eos_id(&self) -> u32 {
        self.pad_id
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Marks the backbone frozen or trainable. The training loop reads this
    /// flag when choosing which parameters the optimizer may touch; gradients
    /// still flow through a frozen backbone.
    pub fn set_trainable(&mut self, flag: bool) {
        self.trainable = flag;
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            Some(id) => Err(Error::Data(format!("token id {id} outside vocabulary of {}", self.vocab_size))),
            None => Ok(()),
        }
    }

    /// `(B, T)` u32 ids -> `(B, T, W)`.
    pub fn embed_tokens(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        Ok(self
            .token_embedding
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, t, self.config.width))?)
    }

    /// Logits `(B, T, V)` for an input embedding sequence `(B, T, W)`.
    pub fn forward_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t, w) = x.dims3()?;
        if w != self.config.width {
            return Err(Error::Shape(format!("lm input width {w}, expected {}", self.config.width)));
        }
        if t > self.config.max_positions {
            return Err(Error::Shape(format!(
                "sequence of {t} positions exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let mut h = x.broadcast_add(&self.positions.narrow(0, 0, t)?)?;
        let mask = causal_mask(t, self.dtype, x.device())?;
        for block in &self.blocks {
            h = block.forward(&h, Some(&mask))?.0;
        }
        let h = self.ln_final.forward(&h)?;
        Ok(h.broadcast_matmul(&self.token_embedding.t()?)?)
    }

    /// Pads (left) or truncates a prompt to exactly 10 ids.
    pub fn fit_prompt(&self, prompt: &[u32]) -> (Vec<u32>, Option<String>) {
        if prompt.len() > PROMPT_PREFIX_LEN {
            let note = format!("prompt of {} tokens truncated to {PROMPT_PREFIX_LEN}", prompt.len());
            log::warn!("{note}");
            (prompt[..PROMPT_PREFIX_LEN].to_vec(), Some(note))
        } else {
            let mut ids = vec![self.pad_id; PROMPT_PREFIX_LEN - prompt.len()];
            ids.extend_from_slice(prompt);
            (ids, None)
        }
    }

    /// Concatenates `(B, 40, W)` audio prefixes with the embedded prompts
    /// into `(B, 50, W)`.
    pub fn assemble_prefix(&self, audio: &Tensor, prompts: &[Vec<u32>]) -> Result<AssembledPrefix> {
        let (b, rows, w) = audio
            .dims3()
            .map_err(|_| Error::Shape(format!("audio prefix must be (batch, 40, width), got {:?}", audio.dims())))?;
        if rows != AUDIO_PREFIX_LEN || w != self.config.width {
            return Err(Error::Shape(format!(
                "audio prefix is {rows} x {w}, expected {AUDIO_PREFIX_LEN} x {}",
                self.config.width
            )));
        }
        if prompts.len() != b {
            return Err(Error::Shape(format!("{} prompts for a batch of {b}", prompts.len())));
        }
        let mut warnings = Vec::new();
        let mut flat = Vec::with_capacity(b * PROMPT_PREFIX_LEN);
        for p in prompts {
            self.check_ids(p)?;
            let (ids, note) = self.fit_prompt(p);
            warnings.extend(note);
            flat.extend(ids);
        }
        let ids = Tensor::from_vec(flat, (b, PROMPT_PREFIX_LEN), audio.device())?;
        let prompt_emb = self.embed_tokens(&ids)?;
        let embeddings = Tensor::cat(&[audio, &prompt_emb], 1)?;
        Ok(AssembledPrefix { embeddings, warnings })
    }

    /// Teacher-forced next-token logits `(B, L, V)`: row `j` is conditioned
    /// on the prefix and targets `0..j`.
    pub fn teacher_forced_logits(&self, prefix: &Tensor, targets: &Tensor) -> Result<Tensor> {
        let (b, l) = targets.dims2()?;
        let (pb, pt, _) = prefix.dims3()?;
        if pb != b {
            return Err(Error::Shape(format!("prefix batch {pb} vs target batch {b}")));
        }
        if l == 0 {
            return Err(Error::Data("empty target sequence".into()));
        }
        self.check_ids(&targets.flatten_all()?.to_vec1::<u32>()?)?;
        let input = if l > 1 {
            let shifted = self.embed_tokens(&targets.narrow(1, 0, l - 1)?.contiguous()?)?;
            Tensor::cat(&[prefix, &shifted], 1)?
        } else {
            prefix.clone()
        };
        let logits = self.forward_embeddings(&input)?;
        Ok(logits.narrow(1, pt - 1, l)?)
    }

    /// Logits `(L, V)` for one assembled prefix and one target sequence.
    pub fn lm_logits(&self, prefix: &AssembledPrefix, targets: &[u32]) -> Result<Tensor> {
        let t = Tensor::from_slice(targets, (1, targets.len()), prefix.embeddings.device())?;
        Ok(self.teacher_forced_logits(&prefix.embeddings, &t)?.get(0)?)
    }

    fn next_logits(&self, prefix: &Tensor, tokens: &[u32]) -> Result<Vec<f64>> {
        let input = if tokens.is_empty() {
            prefix.clone()
        } else {
            let ids = Tensor::from_slice(tokens, (1, tokens.len()), prefix.device())?;
            Tensor::cat(&[prefix, &self.embed_tokens(&ids)?], 1)?
        };
        let logits = self.forward_embeddings(&input)?;
        let t = logits.dims()[1];
        Ok(logits.i((0, t - 1))?.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// Autoregressive decoding from a `(1, 50, W)` prefix. Stops at
    /// end-of-text, after `max_len` steps, or when the context is full.
    pub fn generate(&self, prefix: &Tensor, decoding: &DecodingConfig) -> Result<Generation> {
        let (b, _, _) = prefix.dims3()?;
        if b != 1 {
            return Err(Error::Shape(format!("generate takes one prefix, got a batch of {b}")));
        }
        if decoding.max_len == 0 {
            return Err(Error::Parameter("max_len must be at least 1".into()));
        }
        match decoding.strategy {
            DecodingStrategy::Greedy => self.sample_loop(prefix, decoding, |logits, _| argmax(logits)),
            DecodingStrategy::TopK => {
                let mut rng = ChaCha8Rng::seed_from_u64(decoding.seed);
                self.sample_loop(prefix, decoding, |logits, _| {
                    sample_top_k(logits, decoding.top_k.max(1), decoding.temperature, &mut rng)
                })
            }
            DecodingStrategy::Beam => self.beam_search(prefix, decoding),
        }
    }

    fn room(&self, prefix: &Tensor) -> usize {
        self.config.max_positions.saturating_sub(prefix.dims()[1]) + 1
    }

    fn sample_loop(
        &self,
        prefix: &Tensor,
        decoding: &DecodingConfig,
        mut pick: impl FnMut(&[f64], usize) -> u32,
    ) -> Result<Generation> {
        let mut tokens = Vec::new();
        let limit = decoding.max_len.min(self.room(prefix));
        for step in 0..limit {
            let logits = self.next_logits(prefix, &tokens)?;
            let next = pick(&logits, step);
            if next == self.pad_id {
                return Ok(Generation { tokens, finished: true });
            }
            tokens.push(next);
        }
        Ok(Generation { tokens, finished: false })
    }

    fn beam_search(&self, prefix: &Tensor, decoding: &DecodingConfig) -> Result<Generation> {
        let width = decoding.beam_width.max(1);
        // (tokens, log prob, finished)
        let mut beams: Vec<(Vec<u32>, f64, bool)> = vec![(Vec::new(), 0.0, false)];
        let limit = decoding.max_len.min(self.room(prefix));
        for _ in 0..limit {
            if beams.iter().all(|b| b.2) {
                break;
            }
            let mut candidates = Vec::new();
            for (tokens, score, done) in &beams {
                if *done {
                    candidates.push((tokens.clone(), *score, true));
                    continue;
                }
                let logp = log_softmax(&self.next_logits(prefix, tokens)?);
                let mut order: Vec<usize> = (0..logp.len()).collect();
                order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
                for &id in order.iter().take(width) {
                    let mut t = tokens.clone();
                    let finished = id as u32 == self.pad_id;
                    if !finished {
                        t.push(id as u32);
                    }
                    candidates.push((t, score + logp[id], finished));
                }
            }
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            candidates.truncate(width);
            beams = candidates;
        }
        let (tokens, _, finished) = beams.into_iter().next().expect("beam search keeps at least one beam");
        Ok(Generation { tokens, finished })
    }

    pub fn device(&self) -> &Device {
        self.token_embedding.device()
    }
}

fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best as u32
}

fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    xs.iter().map(|v| v - lse).collect()
}

fn sample_top_k<R: Rng + ?Sized>(logits: &[f64], k: usize, temperature: f64, rng: &mut R) -> u32 {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let t = temperature.max(1e-6);
    let top = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - top) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (&i, w) in order.iter().zip(&weights) {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    order[order.len() - 1] as u32
}

/// Row-wise softmax of a logits tensor along its last axis.
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}
