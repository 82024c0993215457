//! Joint-loss optimisation in two stages: language model frozen, then
//! (optionally) trainable.

use candle::backprop::GradStore;
use candle::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Example};
use crate::config::TrainingConfig;
use crate::encoder::{SpeakerEmbedding, SpeakerEncoder};
use crate::error::{Error, Result};
use crate::loss::{captioning_loss, joint_loss_tensor, length_mask};
use crate::model::{SpeakerLm, HEAD_PREFIX, LM_PREFIX, MAPPER_PREFIX};
use crate::speaker_head::first_prefix_vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Mapper and speaker head only.
    A,
    /// Everything, unless the language model is pinned frozen.
    B,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub stage: Stage,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L1")]
    pub l1: f64,
    /// Absent when the speaker loss is disabled.
    #[serde(rename = "L2")]
    pub l2: Option<f64>,
    pub lr: f64,
}

/// Loss tensors for one batch.
pub struct BatchLoss {
    pub total: Tensor,
    pub l1: Tensor,
    pub l2: Option<Tensor>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Forward pass and joint loss for a batch of examples with the given
/// embeddings (one per example).
pub fn batch_loss(
    model: &SpeakerLm,
    embeddings: &[&SpeakerEmbedding],
    examples: &[&Example],
    config: &TrainingConfig,
) -> Result<BatchLoss> {
    if embeddings.len() != examples.len() || examples.is_empty() {
        return Err(Error::Shape(format!("{} embeddings for {} examples", embeddings.len(), examples.len())));
    }
    let device = model.device().clone();
    let audio = model.audio_prefix(embeddings)?;
    let prompts: Vec<Vec<u32>> = examples.iter().map(|e| e.prompt.clone()).collect();
    let prefix = model.lm.assemble_prefix(&audio, &prompts)?;

    let max_len = examples.iter().map(|e| e.target.len()).max().unwrap_or(0);
    let pad = model.tokenizer.pad_id();
    let mut flat = Vec::with_capacity(examples.len() * max_len);
    for e in examples {
        flat.extend_from_slice(&e.target);
        flat.extend(std::iter::repeat_n(pad, max_len - e.target.len()));
    }
    let targets = Tensor::from_vec(flat, (examples.len(), max_len), &device)?;
    let lengths: Vec<usize> = examples.iter().map(|e| e.target.len()).collect();
    let mask = length_mask(&lengths, max_len, model.dtype(), &device)?;
    let logits = model.lm.teacher_forced_logits(&prefix.embeddings, &targets)?;
    let l1 = captioning_loss(&logits, &targets, Some(&mask))?;

    let l2 = if config.speaker_loss_enabled {
        let labels: Vec<u32> = examples.iter().map(|e| e.speaker_class).collect();
        let labels = Tensor::from_vec(labels, examples.len(), &device)?;
        Some(model.head.loss(&first_prefix_vector(&audio)?, &labels)?)
    } else {
        None
    };
    let total = joint_loss_tensor(&l1, l2.as_ref(), config.alpha)?;
    Ok(BatchLoss { total, l1, l2 })
}

fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<()> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(())
}

pub struct Trainer<'a> {
    model: &'a mut SpeakerLm,
    data: &'a Dataset,
    encoder: Option<&'a dyn SpeakerEncoder>,
    step: usize,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// `encoder` re-embeds augmented audio each epoch; without one the
    /// clean embeddings are used throughout.
    pub fn new(model: &'a mut SpeakerLm, data: &'a Dataset, encoder: Option<&'a dyn SpeakerEncoder>) -> Result<Self> {
        if data.examples.is_empty() {
            return Err(Error::Data("dataset has no examples".into()));
        }
        let classes = model.head.classes() as u32;
        if let Some(e) = data.examples.iter().find(|e| e.speaker_class >= classes) {
            return Err(Error::Data(format!("speaker class {} outside the head's {classes}", e.speaker_class)));
        }
        model.config().training.validate()?;
        Ok(Self {
            model,
            data,
            encoder,
            step: 0,
            epoch: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn model(&self) -> &SpeakerLm {
        self.model
    }

    /// Both stages as configured.
    pub fn run(&mut self, sink: &mut dyn FnMut(&MetricRecord) -> Result<()>) -> Result<()> {
        let cfg = self.model.config().training.clone();
        self.run_stage(Stage::A, cfg.stage_a_epochs, None, sink)?;
        self.run_stage(Stage::B, cfg.stage_b_epochs, None, sink)
    }

    /// Runs `epochs` epochs of one stage, stopping early after `max_steps`
    /// optimizer steps when given. Optimizer state starts fresh per stage.
    pub fn run_stage(
        &mut self,
        stage: Stage,
        epochs: usize,
        max_steps: Option<usize>,
        sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
    ) -> Result<()> {
        let config = self.model.config().clone();
        let cfg = &config.training;
        self.model.lm.set_trainable(stage == Stage::B && cfg.finetune_lm);
        let mut vars = self.model.store.vars_with_prefix(&format!("{MAPPER_PREFIX}."));
        vars.extend(self.model.store.vars_with_prefix(&format!("{HEAD_PREFIX}.")));
        if self.model.lm.is_trainable() {
            vars.extend(self.model.store.vars_with_prefix(&format!("{LM_PREFIX}.")));
        }
        let mut opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: cfg.learning_rate_at(self.step),
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut taken = 0;
        for _ in 0..epochs {
            let embeddings =
                self.data
                    .epoch_embeddings(self.encoder, &config.augment, cfg.augmentations_enabled, self.epoch)?;
            let mut order: Vec<usize> = (0..self.data.examples.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(self.epoch as u64);
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                if max_steps.is_some_and(|m| taken >= m) {
                    return Ok(());
                }
                let examples: Vec<&Example> = batch.iter().map(|&i| &self.data.examples[i]).collect();
                let embs: Vec<&SpeakerEmbedding> = examples.iter().map(|e| &embeddings[e.utterance]).collect();
                let loss = batch_loss(self.model, &embs, &examples, cfg)?;
                let record = MetricRecord {
                    step: self.step,
                    epoch: self.epoch,
                    stage,
                    loss: scalar(&loss.total)?,
                    l1: scalar(&loss.l1)?,
                    l2: loss.l2.as_ref().map(scalar).transpose()?,
                    lr: cfg.learning_rate_at(self.step),
                };
                if !record.loss.is_finite() || !record.l1.is_finite() || record.l2.is_some_and(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "loss became non-finite at step {} (epoch {}, stage {stage:?}): L={} L1={} L2={:?}",
                        record.step, record.epoch, record.loss, record.l1, record.l2
                    )));
                }
                opt.set_learning_rate(record.lr);
                let mut grads = loss.total.backward()?;
                if let Some(c) = cfg.grad_clip {
                    clip_gradients(&mut grads, &vars, c)?;
                }
                opt.step(&grads)?;
                sink(&record)?;
                self.step += 1;
                taken += 1;
            }
            self.epoch += 1;
        }
        Ok(())
    }
}

/// Convenience wrapper: trains both stages and returns the metrics.
pub fn train(
    model: &mut SpeakerLm,
    data: &Dataset,
    encoder: Option<&dyn SpeakerEncoder>,
) -> Result<(Vec<MetricRecord>, usize)> {
    let mut log = Vec::new();
    let mut trainer = Trainer::new(model, data, encoder)?;
    trainer.run(&mut |r| {
        log.push(r.clone());
        Ok(())
    })?;
    let steps = trainer.step();
    Ok((log, steps))
}
