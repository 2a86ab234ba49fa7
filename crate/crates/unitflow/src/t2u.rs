//! Text-to-unit generation: a second small decoder-only model over the
//! concatenation "transcript <eoh> units <eos>", trained with the prefix
//! masked so only the unit side carries loss. Used to turn text instruction
//! data into speech instruction data.

use std::path::Path;

use crate::codec::{deduplicate, UnitSequence};
use crate::error::{Error, Result};
use crate::lm::loss::Segment;
use crate::lm::sampling::{sample, SamplingConfig};
use crate::lm::{Model, ModelConfig};
use crate::trainer::{run_stage2, StageConfig, TrainItem, TrainingRunReport};
use crate::vocab::{Vocab, EOH, EOS};

/// Generation stops after this many units when no <eos> arrives.
pub const UNIT_CAP: usize = 512;

/// Compact defaults for the generator model.
pub fn default_t2u_model_config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        layers: 2,
        model_dim: 64,
        heads: 2,
        ffn_dim: 256,
        max_len: 768,
        vocab_size: vocab.total_size() as usize,
    }
}

/// Token ids and prefix length for one (transcript, units) pair.
pub fn t2u_item(vocab: &Vocab, transcript: &str, units: &UnitSequence) -> Result<TrainItem> {
    let mut ids = vocab.encode(transcript)?;
    ids.push(EOH);
    let prefix_len = ids.len();
    for &u in &units.units {
        ids.push(vocab.unit_to_id(u)?);
    }
    ids.push(EOS);
    let len = ids.len();
    Ok(TrainItem {
        ids,
        segments: vec![Segment::new(0, prefix_len, len)],
    })
}

/// Trains the generator on (transcript, unit sequence) pairs.
pub fn train_text_to_unit(
    pairs: &[(String, UnitSequence)],
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    cfg: &StageConfig,
    checkpoint_out: Option<&Path>,
) -> Result<(Model<f32>, TrainingRunReport)> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut items = Vec::with_capacity(pairs.len());
    for (transcript, units) in pairs {
        if transcript.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        items.push(t2u_item(vocab, transcript, units)?);
    }
    let model = crate::trainer::init_model(model_cfg, vocab, cfg.seed)?;
    let packs: Vec<crate::dataset::PackedSequence> = items
        .into_iter()
        .map(|it| crate::dataset::PackedSequence {
            token_ids: it.ids,
            segments: it.segments,
        })
        .collect();
    run_stage2(&packs, model, cfg, checkpoint_out)
}

/// Greedy text-to-unit conversion; the result is reduced.
pub fn text_to_units(text: &str, model: &Model<f32>, vocab: &Vocab) -> Result<UnitSequence> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let mut prompt = vocab.encode(text)?;
    prompt.push(EOH);
    if prompt.len() >= model.cfg.max_len {
        return Err(Error::OverlongInput {
            len: prompt.len(),
            max_len: model.cfg.max_len,
        });
    }
    let sampling = SamplingConfig {
        top_k: 1,
        max_new_tokens: UNIT_CAP,
        ..Default::default()
    };
    let generated = sample(model, &prompt, &sampling, None, &[EOS])?;
    let units: Vec<u32> = generated
        .ids
        .iter()
        .filter_map(|&id| vocab.id_to_unit(id))
        .collect();
    if units.is_empty() {
        return Err(Error::GenerationFailed);
    }
    Ok(deduplicate(&UnitSequence::new(units, false)))
}
