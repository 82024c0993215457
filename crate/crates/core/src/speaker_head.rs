//! Linear speaker classifier applied to the first audio prefix vector.

use candle::{DType, IndexOp, Module, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;

/// Lower bound applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SpeakerHead {
    linear: Linear,
    width: usize,
    classes: usize,
}

impl SpeakerHead {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Data(format!("speaker head needs at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let linear = Linear::new(store, prefix, width, classes, true, &mut rng)?;
        Ok(Self { linear, width, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Pre-softmax scores `(B, C)` for first prefix vectors `(B, W)`.
    pub fn logits(&self, first: &Tensor) -> Result<Tensor> {
        let (_, w) = first.dims2()?;
        if w != self.width {
            return Err(Error::Shape(format!("speaker head input width {w}, expected {}", self.width)));
        }
        Ok(self.linear.forward(first)?)
    }

    /// Class probabilities `(B, C)`.
    pub fn classify(&self, first: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.logits(first)?, D::Minus1)?)
    }

    /// Probabilities for one 768-wide vector.
    pub fn classify_vector(&self, v: &[f32], dtype: DType) -> Result<Vec<f64>> {
        let x = Tensor::from_slice(v, (1, v.len()), self.linear.weight().device())?.to_dtype(dtype)?;
        Ok(self.classify(&x)?.i(0)?.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// Batch-mean cross-entropy against integer labels, with clamped logs.
    pub fn loss(&self, first: &Tensor, labels: &Tensor) -> Result<Tensor> {
        ce_loss_tensor(&self.classify(first)?, labels)
    }
}

/// First prefix vector of every example: `(B, K, W)` -> `(B, W)`.
pub fn first_prefix_vector(prefix: &Tensor) -> Result<Tensor> {
    Ok(prefix.i((.., 0, ..))?.contiguous()?)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-sum_i y_i ln(max(p_i, 1e-12))`.
pub fn ce_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("label length {} vs prediction length {}", y.len(), y_hat.len())));
    }
    Ok(-y
        .iter()
        .zip(y_hat)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| t * p.max(LOG_CLAMP).ln())
        .sum::<f64>())
}

/// Tensor form of [`ce_loss`] for probabilities `(B, C)` and u32 labels
/// `(B,)`, averaged over the batch.
pub fn ce_loss_tensor(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (b, c) = probs.dims2()?;
    if labels.dims() != [b] {
        return Err(Error::Shape(format!("labels {:?} for a batch of {b}", labels.dims())));
    }
    let max = labels.max(0)?.to_scalar::<u32>()?;
    if max as usize >= c {
        return Err(Error::Data(format!("label {max} outside {c} classes")));
    }
    let logp = probs.clamp(LOG_CLAMP, 1.0)?.log()?;
    let picked = logp.gather(&labels.unsqueeze(1)?, 1)?;
    Ok(picked.neg()?.mean_all()?)
}
