//! Chain-of-modality inference: prompt assembly, response parsing, and the
//! assemble -> sample -> parse -> synthesize loop.
//!
//! The parser is total: any id sequence yields a ChainResponse, with
//! well_formed=false plus best-effort fields when the template structure is
//! violated.

use serde::Serialize;

use crate::audio::Waveform;
use crate::codec::{Codebook, UnitSequence};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::lm::sampling::{sample, SamplingConfig};
use crate::lm::{LoraAdapters, Model};
use crate::synth::{synthesize, SynthConfig};
use crate::templates::{chain_prompt, ChainFormat, ChainSection};
use crate::vocab::{Vocab, EOA, EOS, SPEECHGPT, TA, TQ, UA};

#[derive(Debug, Clone)]
pub enum ChainInstruction<'a> {
    Text(&'a str),
    Speech(&'a UnitSequence),
}

/// Tokenized prompt for the chosen format, ending right after
/// `"[SpeechGPT]: "` so generation starts in the response region.
pub fn assemble_prompt(
    vocab: &Vocab,
    instruction: &ChainInstruction,
    format: ChainFormat,
) -> Result<Vec<u32>> {
    let slot = match (instruction, format.speech_instruction()) {
        (ChainInstruction::Speech(units), true) => {
            if units.is_empty() {
                return Err(Error::EmptyUnits);
            }
            units.validate(vocab.unit_count as usize)?;
            units.render()
        }
        (ChainInstruction::Text(text), false) => {
            if text.trim().is_empty() {
                return Err(Error::EmptyText);
            }
            text.to_string()
        }
        (ChainInstruction::Text(_), true) => {
            return Err(Error::ModalityMismatch {
                format: format.as_str(),
                expected: "speech",
            })
        }
        (ChainInstruction::Speech(_), false) => {
            return Err(Error::ModalityMismatch {
                format: format.as_str(),
                expected: "text",
            })
        }
    };
    vocab.encode(&chain_prompt(format, &slot))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResponse {
    pub transcribed_instruction: Option<String>,
    pub text_response: Option<String>,
    pub unit_response: Option<UnitSequence>,
    pub raw_ids: Vec<u32>,
    pub well_formed: bool,
    pub truncated: bool,
}

/// JSON view of a ChainResponse.
#[derive(Debug, Clone, Serialize)]
pub struct ChainResponseJson {
    pub transcribed_instruction: Option<String>,
    pub text_response: Option<String>,
    pub unit_response: Option<Vec<u32>>,
    pub raw_ids: Vec<u32>,
    pub well_formed: bool,
    pub truncated: bool,
}

impl From<&ChainResponse> for ChainResponseJson {
    fn from(r: &ChainResponse) -> Self {
        ChainResponseJson {
            transcribed_instruction: r.transcribed_instruction.clone(),
            text_response: r.text_response.clone(),
            unit_response: r.unit_response.as_ref().map(|u| u.units.clone()),
            raw_ids: r.raw_ids.clone(),
            well_formed: r.well_formed,
            truncated: r.truncated,
        }
    }
}

const BYTE_SEMI: u32 = b';' as u32;
const BYTE_SPACE: u32 = b' ' as u32;
const BYTE_COLON: u32 = b':' as u32;
const BYTE_DOT: u32 = b'.' as u32;

fn section_of(id: u32) -> Option<ChainSection> {
    match id {
        TQ => Some(ChainSection::Tq),
        TA => Some(ChainSection::Ta),
        UA => Some(ChainSection::Ua),
        _ => None,
    }
}

/// Splits ids into `[tq]`/`[ta]`/`[ua]` sections and checks them against the
/// format's template. Accepts either a bare response region (as generation
/// produces) or a full builder string containing `[SpeechGPT]: `.
pub fn parse_chain_output(vocab: &Vocab, ids: &[u32], format: ChainFormat) -> ChainResponse {
    let mut well_formed = true;

    // skip the prompt of a full formatted string
    let mut cursor = 0usize;
    if let Some(pos) = ids.iter().position(|&t| t == SPEECHGPT) {
        cursor = pos + 1;
        if ids.get(cursor) == Some(&BYTE_COLON) && ids.get(cursor + 1) == Some(&BYTE_SPACE) {
            cursor += 2;
        } else {
            well_formed = false;
        }
    }
    let region = &ids[cursor..];

    let (body, after_eoa, truncated) = match region.iter().position(|&t| t == EOA) {
        Some(p) => (&region[..p], &region[p + 1..], false),
        None => (region, &[][..], true),
    };
    if truncated {
        well_formed = false;
    }
    // nothing but an optional final period may follow <eoa>
    if !(after_eoa.is_empty() || after_eoa == [BYTE_DOT]) {
        well_formed = false;
    }

    let markers: Vec<(usize, ChainSection)> = body
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| section_of(t).map(|s| (i, s)))
        .collect();

    let expected = format.sections();
    let kinds: Vec<ChainSection> = markers.iter().map(|&(_, s)| s).collect();
    if kinds != expected {
        well_formed = false;
    }
    if markers.first().map(|&(i, _)| i) != Some(0) {
        well_formed = false;
    }

    let mut transcribed_instruction = None;
    let mut text_response = None;
    let mut unit_response = None;

    for (mi, &(pos, section)) in markers.iter().enumerate() {
        let end = markers
            .get(mi + 1)
            .map(|&(next, _)| next)
            .unwrap_or(body.len());
        let mut content = &body[pos + 1..end];
        // "[xx] content" - one space after the marker
        if content.first() == Some(&BYTE_SPACE) {
            content = &content[1..];
        } else {
            well_formed = false;
        }
        // "; " separates sections
        let last = mi + 1 == markers.len();
        if !last {
            if content.len() >= 2 && content[content.len() - 2..] == [BYTE_SEMI, BYTE_SPACE] {
                content = &content[..content.len() - 2];
            } else {
                well_formed = false;
            }
        }

        match section {
            ChainSection::Tq | ChainSection::Ta => {
                // text sections must be plain bytes
                if !content.iter().all(|&t| t < 256) {
                    well_formed = false;
                }
                let text = vocab.decode_to_string(content);
                match section {
                    ChainSection::Tq if transcribed_instruction.is_none() => {
                        transcribed_instruction = Some(text)
                    }
                    ChainSection::Ta if text_response.is_none() => text_response = Some(text),
                    _ => well_formed = false, // duplicate marker
                }
            }
            ChainSection::Ua => {
                let units: Vec<u32> = content.iter().filter_map(|&t| vocab.id_to_unit(t)).collect();
                if units.len() != content.len() || units.is_empty() {
                    well_formed = false;
                }
                let reduced = units.windows(2).all(|w| w[0] != w[1]);
                if !reduced {
                    well_formed = false;
                }
                if unit_response.is_none() {
                    unit_response = Some(UnitSequence::new(units, reduced));
                } else {
                    well_formed = false;
                }
            }
        }
    }

    ChainResponse {
        transcribed_instruction,
        text_response,
        unit_response,
        raw_ids: ids.to_vec(),
        well_formed,
        truncated,
    }
}

pub struct RespondResult {
    pub response: ChainResponse,
    pub audio: Option<Waveform>,
}

/// assemble -> sample -> parse; well-formed unit responses are synthesized
/// when a codebook is available.
#[allow(clippy::too_many_arguments)]
pub fn respond(
    model: &Model<f32>,
    adapters: Option<&LoraAdapters<f32>>,
    vocab: &Vocab,
    instruction: &ChainInstruction,
    format: ChainFormat,
    sampling: &SamplingConfig,
    codebook: Option<&Codebook>,
    synth_cfg: &SynthConfig,
    feature_cfg: &FeatureConfig,
) -> Result<RespondResult> {
    let prompt = assemble_prompt(vocab, instruction, format)?;
    let generated = sample(model, &prompt, sampling, adapters, &[EOA, EOS])?;
    let mut response = parse_chain_output(vocab, &generated.ids, format);
    if generated.truncated {
        response.truncated = true;
        response.well_formed = false;
    }

    let audio = match (&response.unit_response, codebook, response.well_formed) {
        (Some(units), Some(cb), true) => Some(synthesize(units, cb, synth_cfg, feature_cfg)?),
        _ => None,
    };
    Ok(RespondResult { response, audio })
}
