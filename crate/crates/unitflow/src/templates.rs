//! Instruction templates.
//!
//! Cross-modal samples use
//! `[Human]:{D}. This is input: {INPUT}<eoh>.[SpeechGPT]: {TARGET}<eos>.`
//! with the unit rendering and the transcript swapping slots between the ASR
//! and TTS directions. Chain-of-modality samples use one of four templates
//! selected by instruction/response modality; responses chain through
//! `[tq]` (transcribed question), `[ta]` (text answer), and `[ua]` (unit
//! answer) sections, separated by "; " and terminated by `<eoa>`.
//!
//! Prompts end right after the literal `"[SpeechGPT]: "`, which is also the
//! prefix/target boundary for loss masking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Chain-of-modality input/output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainFormat {
    /// Speech instruction, speech response: [tq], [ta], [ua].
    #[serde(rename = "si-sr")]
    SiSr,
    /// Speech instruction, text response: [tq], [ta].
    #[serde(rename = "si-tr")]
    SiTr,
    /// Text instruction, speech response: [ta], [ua].
    #[serde(rename = "ti-sr")]
    TiSr,
    /// Text instruction, text response: [ta].
    #[serde(rename = "ti-tr")]
    TiTr,
}

pub const ALL_CHAIN_FORMATS: [ChainFormat; 4] = [
    ChainFormat::SiSr,
    ChainFormat::SiTr,
    ChainFormat::TiSr,
    ChainFormat::TiTr,
];

impl ChainFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "si-sr" => Ok(ChainFormat::SiSr),
            "si-tr" => Ok(ChainFormat::SiTr),
            "ti-sr" => Ok(ChainFormat::TiSr),
            "ti-tr" => Ok(ChainFormat::TiTr),
            other => Err(Error::Config(format!(
                "unknown chain format '{other}' (expected si-sr, si-tr, ti-sr, or ti-tr)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ChainFormat::SiSr => "si-sr",
            ChainFormat::SiTr => "si-tr",
            ChainFormat::TiSr => "ti-sr",
            ChainFormat::TiTr => "ti-tr",
        }
    }

    pub fn speech_instruction(&self) -> bool {
        matches!(self, ChainFormat::SiSr | ChainFormat::SiTr)
    }

    pub fn speech_response(&self) -> bool {
        matches!(self, ChainFormat::SiSr | ChainFormat::TiSr)
    }

    /// Response sections in template order.
    pub fn sections(&self) -> &'static [ChainSection] {
        match self {
            ChainFormat::SiSr => &[ChainSection::Tq, ChainSection::Ta, ChainSection::Ua],
            ChainFormat::SiTr => &[ChainSection::Tq, ChainSection::Ta],
            ChainFormat::TiSr => &[ChainSection::Ta, ChainSection::Ua],
            ChainFormat::TiTr => &[ChainSection::Ta],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainSection {
    Tq,
    Ta,
    Ua,
}

pub const PREFIX_BOUNDARY: &str = "[SpeechGPT]: ";

/// Cross-modal prefix and target around the loss boundary.
pub fn cross_modal_parts(description: &str, input: &str, target: &str) -> (String, String) {
    (
        format!("[Human]:{description}. This is input: {input}<eoh>.{PREFIX_BOUNDARY}"),
        format!("{target}<eos>."),
    )
}

pub fn cross_modal_string(description: &str, input: &str, target: &str) -> String {
    let (prefix, suffix) = cross_modal_parts(description, input, target);
    prefix + &suffix
}

/// Plain text-instruction pair in the same conversational frame.
pub fn text_pair_parts(instruction: &str, response: &str) -> (String, String) {
    (
        format!("[Human]:{instruction}<eoh>.{PREFIX_BOUNDARY}"),
        format!("{response}<eos>."),
    )
}

/// Chain prompt for the given format, ending with `"[SpeechGPT]: "`.
/// `instruction` is the rendered instruction slot (unit markers for speech
/// formats, plain text otherwise).
pub fn chain_prompt(format: ChainFormat, instruction: &str) -> String {
    match format {
        ChainFormat::SiSr => format!(
            "[Human]: This is a speech instruction: {instruction}. And your response should be \
             speech. You can do it step by step. You can first transcribe the instruction and \
             get the text Instruction. Then you can think about the instruction and get the text \
             response. Last, you should speak the response aloud <eoh>. {PREFIX_BOUNDARY}"
        ),
        ChainFormat::SiTr => format!(
            "[Human]: This is a speech instruction: {instruction}. And your response should be \
             text. You can do it step by step. You can first transcribe the instruction and get \
             the text instruction. Then you can think about the instruction and get the text \
             response. <eoh>. {PREFIX_BOUNDARY}"
        ),
        ChainFormat::TiSr => format!(
            "[Human]: This is a text instruction: {instruction}. And your response should be \
             speech. You can do it step by step. You can think about the instruction and get the \
             text response. Then you should speak the response aloud <eoh>. {PREFIX_BOUNDARY}"
        ),
        ChainFormat::TiTr => format!(
            "[Human]: This is a text instruction: {instruction}. And your response should be \
             text. You can think about the instruction and get the text response. \
             {PREFIX_BOUNDARY}"
        ),
    }
}

/// Chain response region: the sections the format permits, separated by
/// "; " and terminated by `<eoa>.`.
pub fn chain_response(
    format: ChainFormat,
    text_instruction: &str,
    text_response: &str,
    unit_response: &str,
) -> String {
    let mut parts: Vec<String> = Vec::new();
    for section in format.sections() {
        match section {
            ChainSection::Tq => parts.push(format!("[tq] {text_instruction}")),
            ChainSection::Ta => parts.push(format!("[ta] {text_response}")),
            ChainSection::Ua => parts.push(format!("[ua] {unit_response}")),
        }
    }
    format!("{}<eoa>.", parts.join("; "))
}
