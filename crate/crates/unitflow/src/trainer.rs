//! Three-stage training: unit continuation pre-training, prefix-masked
//! instruction fine-tuning, and LoRA-only chain fine-tuning.
//!
//! Every run is bit-deterministic for a fixed (seed, config, data): batch
//! order comes from one seeded generator, per-sample gradients are computed
//! in parallel but reduced in sample order, and the optimizer walks
//! parameters in a fixed order.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::UnitSequence;
use crate::dataset::PackedSequence;
use crate::error::{Error, Result};
use crate::lm::checkpoint::{save_adapters, save_model};
use crate::lm::loss::{nll_loss_and_grad, scored_positions, validate_segments, Segment};
use crate::lm::ops::Mat;
use crate::lm::{LoraAdapters, LoraConfig, Model, ModelConfig, ParamSelection};
use crate::vocab::{expand_embeddings, random_embeddings, Vocab};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub peak_lr: f32,
    pub max_len: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub save_every: usize,
    pub lora: Option<LoraConfig>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            stage: 1,
            batch_size: 16,
            peak_lr: 1e-3,
            max_len: 1024,
            steps: 500,
            warmup_steps: 50,
            seed: 0,
            save_every: 0,
            lora: None,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::BadStage(self.stage));
        }
        if self.batch_size == 0 || self.steps == 0 || self.max_len == 0 {
            return Err(Error::Config("batch_size, steps, max_len must be positive".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.steps {
            return Err(Error::Config(
                "warmup_steps must be in [1, steps)".into(),
            ));
        }
        match (self.stage, &self.lora) {
            (3, None) => return Err(Error::MissingLora),
            (1 | 2, Some(_)) => {
                return Err(Error::Config("lora config is only valid for stage 3".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Linear warmup to peak_lr, then cosine decay that reaches zero exactly
    /// at the last executed step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.peak_lr as f64;
        if step <= self.warmup_steps {
            return peak * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - 1 - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        peak * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingRunReport {
    pub stage: u8,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub final_checkpoint: Option<PathBuf>,
    pub dropped_samples: usize,
    pub trainable_parameters: usize,
    pub wall_seconds: f64,
}

impl TrainingRunReport {
    pub fn step_logs(&self) -> Vec<StepLog> {
        self.losses
            .iter()
            .zip(self.lrs.iter())
            .enumerate()
            .map(|(step, (&loss, &lr))| StepLog { step, loss, lr })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    fn new(shapes: &[usize]) -> Self {
        Adam {
            m: shapes.iter().map(|&n| vec![0f32; n]).collect(),
            v: shapes.iter().map(|&n| vec![0f32; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [(String, &mut Mat<f32>)], grads: &[&Mat<f32>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (pi, (_, p)) in params.iter_mut().enumerate() {
            let g = &grads[pi].data;
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for i in 0..g.len() {
                let gi = g[i] as f64;
                let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                p.data[i] = (p.data[i] as f64 - update) as f32;
            }
        }
    }
}

fn clip_gradients(grads: &mut [&mut Mat<f32>]) {
    let mut sq = 0f64;
    for g in grads.iter() {
        for &v in &g.data {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > GRAD_CLIP {
        let scale = (GRAD_CLIP / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= scale;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shared training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl TrainItem {
    fn validate(&self, max_len: usize, vocab_size: usize) -> Result<()> {
        if self.ids.len() > max_len {
            return Err(Error::OverlongInput {
                len: self.ids.len(),
                max_len,
            });
        }
        for &id in &self.ids {
            if id as usize >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: vocab_size,
                });
            }
        }
        validate_segments(self.ids.len(), &self.segments)?;
        if scored_positions(&self.segments).is_empty() {
            return Err(Error::EmptyTarget);
        }
        Ok(())
    }
}

fn batch_order(n: usize, steps: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut batches = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        batches.push(batch);
    }
    batches
}

fn train_loop(
    model: &mut Model<f32>,
    mut adapters: Option<&mut LoraAdapters<f32>>,
    items: &[TrainItem],
    cfg: &StageConfig,
    selection: ParamSelection,
    checkpoint_out: Option<&Path>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for item in items {
        item.validate(cfg.max_len.min(model.cfg.max_len), model.cfg.vocab_size)?;
    }

    let mut adam = match selection {
        ParamSelection::FullModel => {
            let shapes: Vec<usize> = model.params().iter().map(|(_, m)| m.data.len()).collect();
            Adam::new(&shapes)
        }
        ParamSelection::LoraOnly => {
            let a = adapters.as_deref().expect("stage 3 requires adapters");
            let shapes: Vec<usize> = a.params().iter().map(|(_, m)| m.data.len()).collect();
            Adam::new(&shapes)
        }
    };

    let batches = batch_order(items.len(), cfg.steps, cfg.batch_size, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut lrs = Vec::with_capacity(cfg.steps);

    for (step, batch) in batches.iter().enumerate() {
        let frozen_adapters = adapters.as_deref();
        // per-sample gradients in parallel, reduced in sample order
        let results: Vec<(f64, usize, Model<f32>, Option<LoraAdapters<f32>>)> = batch
            .par_iter()
            .map(|&idx| {
                let item = &items[idx];
                let (logits, cache) = model
                    .forward_with_cache(&item.ids, frozen_adapters)
                    .expect("validated item");
                let (sum, count, dlogits) =
                    nll_loss_and_grad(&logits, &item.ids, &item.segments)
                        .expect("validated item");
                let mut g = model.zeros_like();
                let mut lg = frozen_adapters.map(|a| a.zeros_like());
                model.backward(&item.ids, frozen_adapters, &cache, &dlogits, &mut g, lg.as_mut());
                (sum, count, g, lg)
            })
            .collect();

        let mut loss_sum = 0f64;
        let mut count_sum = 0usize;
        let mut grad_model = model.zeros_like();
        let mut grad_lora = adapters.as_deref().map(|a| a.zeros_like());
        for (sum, count, g, lg) in &results {
            loss_sum += sum;
            count_sum += count;
            grad_model.accumulate(g);
            if let (Some(acc), Some(lg)) = (grad_lora.as_mut(), lg.as_ref()) {
                acc.accumulate(lg);
            }
        }
        let inv = 1.0 / count_sum as f64;
        for (_, m) in grad_model.params_mut() {
            for v in m.data.iter_mut() {
                *v = (*v as f64 * inv) as f32;
            }
        }
        if let Some(gl) = grad_lora.as_mut() {
            for (_, m) in gl.params_mut() {
                for v in m.data.iter_mut() {
                    *v = (*v as f64 * inv) as f32;
                }
            }
        }

        let lr = cfg.lr_at(step);
        match selection {
            ParamSelection::FullModel => {
                let mut g: Vec<&mut Mat<f32>> =
                    grad_model.params_mut().into_iter().map(|(_, m)| m).collect();
                clip_gradients(&mut g);
                let gs: Vec<&Mat<f32>> = g.iter().map(|m| &**m).collect();
                adam.step(&mut model.params_mut(), &gs, lr);
            }
            ParamSelection::LoraOnly => {
                let gl = grad_lora.as_mut().expect("stage 3 gradients");
                let mut g: Vec<&mut Mat<f32>> =
                    gl.params_mut().into_iter().map(|(_, m)| m).collect();
                clip_gradients(&mut g);
                let gs: Vec<&Mat<f32>> = g.iter().map(|m| &**m).collect();
                let a = adapters.as_deref_mut().expect("stage 3 adapters");
                adam.step(&mut a.params_mut(), &gs, lr);
            }
        }

        losses.push(loss_sum * inv);
        lrs.push(lr);

        if let Some(path) = checkpoint_out {
            if cfg.save_every > 0 && (step + 1) % cfg.save_every == 0 && step + 1 < cfg.steps {
                match selection {
                    ParamSelection::FullModel => save_model(path, model)?,
                    ParamSelection::LoraOnly => {
                        save_adapters(path, adapters.as_deref().unwrap())?
                    }
                }
            }
        }
    }

    if let Some(path) = checkpoint_out {
        match selection {
            ParamSelection::FullModel => save_model(path, model)?,
            ParamSelection::LoraOnly => save_adapters(path, adapters.as_deref().unwrap())?,
        }
    }
    Ok((losses, lrs))
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Seeds derived from one root seed so each random consumer is independent.
pub fn derived_seed(root: u64, purpose: &str) -> u64 {
    // FNV-1a over the purpose tag, mixed with the root
    let mut h: u64 = 0xcbf29ce484222325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    root ^ h
}

/// Fresh model with the expanded-vocabulary embedding: a seeded base
/// embedding extended with unit-token rows, original rows preserved.
pub fn init_model(model_cfg: &ModelConfig, vocab: &Vocab, seed: u64) -> Result<Model<f32>> {
    if model_cfg.vocab_size != vocab.total_size() as usize {
        return Err(Error::Config(format!(
            "model vocab_size {} != expanded vocabulary size {}",
            model_cfg.vocab_size,
            vocab.total_size()
        )));
    }
    let base = random_embeddings(
        vocab.base_size as usize,
        model_cfg.model_dim,
        derived_seed(seed, "base-embedding"),
        crate::lm::INIT_SCALE,
    );
    let expanded = expand_embeddings(
        &base,
        vocab.unit_count as usize,
        derived_seed(seed, "unit-embedding"),
        crate::lm::INIT_SCALE,
    )?;
    Model::with_embedding(model_cfg.clone(), &expanded, derived_seed(seed, "model-init"))
}

/// Stage 1: next-token prediction over pure unit-token sequences
/// (no prefix masking). Sequences shorter than two units are dropped.
pub fn run_stage1(
    sequences: &[UnitSequence],
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    cfg: &StageConfig,
    checkpoint_out: Option<&Path>,
) -> Result<(Model<f32>, TrainingRunReport)> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::BadStage(cfg.stage));
    }
    let start = Instant::now();
    let mut items = Vec::new();
    let mut dropped = 0usize;
    for seq in sequences {
        let mut ids = Vec::with_capacity(seq.len());
        for &u in &seq.units {
            ids.push(vocab.unit_to_id(u)?);
        }
        ids.truncate(cfg.max_len.min(model_cfg.max_len));
        if ids.len() < 2 {
            dropped += 1;
            continue;
        }
        let len = ids.len();
        items.push(TrainItem {
            ids,
            segments: vec![Segment::new(0, 0, len)],
        });
    }
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut model = init_model(model_cfg, vocab, cfg.seed)?;
    let (losses, lrs) = train_loop(
        &mut model,
        None,
        &items,
        cfg,
        ParamSelection::FullModel,
        checkpoint_out,
    )?;
    let trainable = model.parameter_count();
    Ok((
        model,
        TrainingRunReport {
            stage: 1,
            losses,
            lrs,
            final_checkpoint: checkpoint_out.map(|p| p.to_path_buf()),
            dropped_samples: dropped,
            trainable_parameters: trainable,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

fn packed_items(packs: &[PackedSequence]) -> Vec<TrainItem> {
    packs
        .iter()
        .map(|p| TrainItem {
            ids: p.token_ids.clone(),
            segments: p.segments.clone(),
        })
        .collect()
}

/// Stage 2: prefix-masked loss over packed instruction sequences, all
/// parameters trainable. The packed input is already mixed (cross-modal
/// plus text-instruction samples at the configured ratio).
pub fn run_stage2(
    packs: &[PackedSequence],
    mut model: Model<f32>,
    cfg: &StageConfig,
    checkpoint_out: Option<&Path>,
) -> Result<(Model<f32>, TrainingRunReport)> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::BadStage(cfg.stage));
    }
    let start = Instant::now();
    let items = packed_items(packs);
    let (losses, lrs) = train_loop(
        &mut model,
        None,
        &items,
        cfg,
        ParamSelection::FullModel,
        checkpoint_out,
    )?;
    let trainable = model.parameter_count();
    Ok((
        model,
        TrainingRunReport {
            stage: 2,
            losses,
            lrs,
            final_checkpoint: checkpoint_out.map(|p| p.to_path_buf()),
            dropped_samples: 0,
            trainable_parameters: trainable,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Stage 3: same loss as stage 2 on chain-formatted packs, but only the
/// LoRA adapters move; the base model is left bit-identical.
pub fn run_stage3(
    packs: &[PackedSequence],
    model: &Model<f32>,
    cfg: &StageConfig,
    checkpoint_out: Option<&Path>,
) -> Result<(LoraAdapters<f32>, TrainingRunReport)> {
    cfg.validate()?;
    if cfg.stage != 3 {
        return Err(Error::BadStage(cfg.stage));
    }
    let lora_cfg = cfg.lora.ok_or(Error::MissingLora)?;
    let start = Instant::now();
    let mut adapters =
        LoraAdapters::new_seeded(&model.cfg, lora_cfg, derived_seed(cfg.seed, "lora-init"))?;
    let items = packed_items(packs);
    // the loop never takes &mut model in this mode
    let mut frozen = model.clone();
    let (losses, lrs) = train_loop(
        &mut frozen,
        Some(&mut adapters),
        &items,
        cfg,
        ParamSelection::LoraOnly,
        checkpoint_out,
    )?;
    debug_assert!(frozen == *model);
    let trainable = adapters.parameter_count();
    Ok((
        adapters,
        TrainingRunReport {
            stage: 3,
            losses,
            lrs,
            final_checkpoint: checkpoint_out.map(|p| p.to_path_buf()),
            dropped_samples: 0,
            trainable_parameters: trainable,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}
