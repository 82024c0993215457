//! Trainable mapping from one speaker embedding to a sequence of 40 prefix
//! vectors in the language model's input space.
//!
//! Two variants share the same contract. The transformer mapper expands the
//! embedding with one fully connected layer and a rectifier, reshapes the
//! result to `40 x width` and refines it with a stack of self-attention
//! layers over the 40 positions. The MLP mapper projects through a tanh
//! hidden layer straight to `40 * width` values.

use candle::{DType, Device, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{SpeakerEmbedding, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerBlock};
use crate::params::ParamStore;

/// Number of audio prefix vectors.
pub const AUDIO_PREFIX_LEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapperVariant {
    Transformer,
    Mlp,
}

impl std::fmt::Display for MapperVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MapperVariant::Transformer => f.write_str("transformer"),
            MapperVariant::Mlp => f.write_str("mlp"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    pub variant: MapperVariant,
    /// Prefix vector width; must equal the language model width.
    pub width: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            variant: MapperVariant::Transformer,
            width: 768,
            transformer_layers: 8,
            heads: 8,
            ff_width: 4 * 768,
            mlp_hidden: 15_872,
            seed: 0,
        }
    }
}

impl MapperConfig {
    /// Size of the flat vector that is reshaped into the prefix.
    pub fn expansion_width(&self) -> usize {
        AUDIO_PREFIX_LEN * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("mapper width must be positive".into()));
        }
        match self.variant {
            MapperVariant::Transformer => {
                if self.transformer_layers == 0 || self.ff_width == 0 {
                    return Err(Error::Config("transformer mapper needs layers and ff_width".into()));
                }
                if self.heads == 0 || self.width % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "mapper width {} is not divisible by {} heads",
                        self.width, self.heads
                    )));
                }
            }
            MapperVariant::Mlp => {
                if self.mlp_hidden == 0 {
                    return Err(Error::Config("mlp_hidden must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// `40 x width` prefix vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixSequence {
    width: usize,
    values: Vec<f32>,
}

impl PrefixSequence {
    pub fn new(width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != AUDIO_PREFIX_LEN * width {
            return Err(Error::Shape(format!(
                "prefix has {} values, expected {AUDIO_PREFIX_LEN} x {width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("prefix holds non-finite values".into()));
        }
        Ok(Self { width, values })
    }

    pub fn rows(&self) -> usize {
        AUDIO_PREFIX_LEN
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (1, AUDIO_PREFIX_LEN, self.width), device)?.to_dtype(dtype)?)
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, width) = t.dims2()?;
        if rows != AUDIO_PREFIX_LEN {
            return Err(Error::Shape(format!("prefix has {rows} rows")));
        }
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Self::new(width, values)
    }
}

/// Per-layer self-attention over the 40 prefix positions, either averaged
/// over heads or one matrix per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub size: usize,
    pub maps: Vec<AttentionMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    /// `None` for the head average.
    pub head: Option<usize>,
    /// Row-major `size x size`; row `i` is query position `i`.
    pub values: Vec<f32>,
}

impl AttentionRecord {
    /// Largest `|row sum - 1|` over every map.
    pub fn max_row_sum_error(&self) -> f64 {
        self.maps
            .iter()
            .flat_map(|m| m.values.chunks(self.size))
            .map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
struct TransformerMapper {
    expand: Linear,
    positions: Tensor,
    layers: Vec<TransformerBlock>,
}

#[derive(Debug, Clone)]
struct MlpMapper {
    hidden: Linear,
    project: Linear,
}

#[derive(Debug, Clone)]
enum Inner {
    Transformer(TransformerMapper),
    Mlp(MlpMapper),
}

#[derive(Debug, Clone)]
pub struct PrefixMapper {
    config: MapperConfig,
    inner: Inner,
    dtype: DType,
}

impl PrefixMapper {
    /// Registers parameters under `prefix` (for example `"mapper"`).
    pub fn new(store: &mut ParamStore, prefix: &str, config: &MapperConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.width;
        let inner = match config.variant {
            MapperVariant::Transformer => {
                let expand = Linear::new(
                    store,
                    &format!("{prefix}.expand"),
                    EMBEDDING_DIM,
                    config.expansion_width(),
                    true,
                    &mut rng,
                )?;
                let positions = store.uniform(&format!("{prefix}.positions"), (AUDIO_PREFIX_LEN, w), 0.02, &mut rng)?;
                let layers = (0..config.transformer_layers)
                    .map(|i| {
                        TransformerBlock::new(
                            store,
                            &format!("{prefix}.layers.{i}"),
                            w,
                            config.heads,
                            config.ff_width,
                            &mut rng,
                        )
                    })
                    .collect::<Result<_>>()?;
                Inner::Transformer(TransformerMapper {
                    expand,
                    positions,
                    layers,
                })
            }
            MapperVariant::Mlp => Inner::Mlp(MlpMapper {
                hidden: Linear::new(store, &format!("{prefix}.hidden"), EMBEDDING_DIM, config.mlp_hidden, true, &mut rng)?,
                project: Linear::new(
                    store,
                    &format!("{prefix}.project"),
                    config.mlp_hidden,
                    config.expansion_width(),
                    true,
                    &mut rng,
                )?,
            }),
        };
        Ok(Self {
            config: config.clone(),
            inner,
            dtype: store.dtype(),
        })
    }

    pub fn config(&self) -> &MapperConfig {
        &self.config
    }

    pub fn variant(&self) -> MapperVariant {
        self.config.variant
    }

    fn check_input(&self, emb: &Tensor) -> Result<usize> {
        let (b, d) = emb
            .dims2()
            .map_err(|_| Error::Shape(format!("mapper input must be (batch, {EMBEDDING_DIM}), got {:?}", emb.dims())))?;
        if d != EMBEDDING_DIM {
            return Err(Error::Shape(format!("embedding dimension {d}, expected {EMBEDDING_DIM}")));
        }
        Ok(b)
    }

    /// `(B, 1024)` -> `(B, 40, width)`.
    pub fn forward(&self, emb: &Tensor) -> Result<Tensor> {
        Ok(self.forward_inner(emb, false)?.0)
    }

    /// Forward pass that also returns each layer's attention probabilities,
    /// shaped `(B, heads, 40, 40)`.
    pub fn forward_with_attention(&self, emb: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        if self.variant() != MapperVariant::Transformer {
            return Err(Error::UnsupportedVariant(
                "attention maps exist only for the transformer mapper".into(),
            ));
        }
        self.forward_inner(emb, true)
    }

    fn forward_inner(&self, emb: &Tensor, keep_attention: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let b = self.check_input(emb)?;
        let w = self.config.width;
        match &self.inner {
            Inner::Transformer(m) => {
                let x = m.expand.forward(emb)?.relu()?.reshape((b, AUDIO_PREFIX_LEN, w))?;
                self.run_layers(m, &x, keep_attention)
            }
            Inner::Mlp(m) => {
                let h = m.hidden.forward(emb)?.tanh()?;
                let out = m.project.forward(&h)?.reshape((b, AUDIO_PREFIX_LEN, w))?;
                Ok((out, Vec::new()))
            }
        }
    }

    fn run_layers(&self, m: &TransformerMapper, x: &Tensor, keep: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let mut x = x.broadcast_add(&m.positions)?;
        let mut maps = Vec::new();
        for layer in &m.layers {
            let (y, probs) = layer.forward(&x, None)?;
            x = y;
            if keep {
                maps.push(probs);
            }
        }
        Ok((x, maps))
    }

    /// The self-attention stage alone, applied to an already reshaped
    /// `(B, 40, width)` input.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        match &self.inner {
            Inner::Transformer(m) => Ok(self.run_layers(m, x, false)?.0),
            Inner::Mlp(_) => Err(Error::UnsupportedVariant("the mlp mapper has no transformer stage".into())),
        }
    }

    pub fn embeddings_tensor(&self, embs: &[&SpeakerEmbedding], device: &Device) -> Result<Tensor> {
        let flat: Vec<f32> = embs.iter().flat_map(|e| e.values().iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (embs.len(), EMBEDDING_DIM), device)?.to_dtype(self.dtype)?)
    }

    /// Maps one embedding to its prefix sequence.
    pub fn map(&self, emb: &SpeakerEmbedding) -> Result<PrefixSequence> {
        let x = self.embeddings_tensor(&[emb], &Device::Cpu)?;
        PrefixSequence::from_tensor(&self.forward(&x)?.get(0)?)
    }

    /// Head-averaged (or per-head) attention maps, one per layer.
    pub fn attention_maps(&self, emb: &SpeakerEmbedding, per_head: bool) -> Result<AttentionRecord> {
        let x = self.embeddings_tensor(&[emb], &Device::Cpu)?;
        let (_, layers) = self.forward_with_attention(&x)?;
        let mut maps = Vec::new();
        for (layer, probs) in layers.iter().enumerate() {
            let probs = probs.get(0)?.to_dtype(DType::F32)?;
            if per_head {
                for h in 0..probs.dims()[0] {
                    maps.push(AttentionMap {
                        layer,
                        head: Some(h),
                        values: probs.get(h)?.flatten_all()?.to_vec1()?,
                    });
                }
            } else {
                maps.push(AttentionMap {
                    layer,
                    head: None,
                    values: probs.mean(0)?.flatten_all()?.to_vec1()?,
                });
            }
        }
        Ok(AttentionRecord {
            size: AUDIO_PREFIX_LEN,
            maps,
        })
    }
}
