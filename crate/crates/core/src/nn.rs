//! Differentiable building blocks shared by the prefix mapper and the
//! language model. Everything is composed from primitive tensor ops so the
//! autograd graph covers it end to end.

use candle::{DType, Device, Module, Tensor, D};
use rand::Rng;

use crate::error::Result;
use crate::params::ParamStore;

/// Added to masked attention scores.
const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// Fan-in scaled uniform init for weight and bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), (out_dim, in_dim), bound, rng)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), out_dim, bound, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle::Result<Tensor> {
        let dims = x.dims();
        let in_dim = *dims.last().expect("linear input has rank >= 1");
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((lead, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_shape = dims[..dims.len() - 1].to_vec();
        out_shape.push(self.out_dim());
        y.reshape(out_shape)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), dim, 1.0)?,
            beta: store.constant(&format!("{name}.beta"), dim, 0.0)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// `(len, len)` additive mask: 0 on and below the diagonal, a large negative
/// number above it.
pub fn causal_mask(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..len * len)
        .map(|i| if i % len > i / len { MASK_VALUE } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(v, (len, len), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(crate::Error::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng)?,
            heads,
        })
    }

    /// Returns the output `(B, T, W)` and the attention probabilities
    /// `(B, H, T, T)`.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> candle::Result<(Tensor, Tensor)> {
        let (b, t, w) = x.dims3()?;
        let dh = w / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let scores = match mask {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, t, w))?;
        Ok((self.out.forward(&ctx)?, probs))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, width, true, rng)?,
        })
    }
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> candle::Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer layer.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln_attn: LayerNorm,
    attn: SelfAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), width)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), width, ff_width, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> candle::Result<(Tensor, Tensor)> {
        let (a, probs) = self.attn.forward(&self.ln_attn.forward(x)?, mask)?;
        let x = (x + a)?;
        let x = (&x + self.ff.forward(&self.ln_ff.forward(&x)?)?)?;
        Ok((x, probs))
    }
}
