//! Instruction dataset construction: manifest ingestion, cross-modal ASR/TTS
//! triplets, chain-of-modality quadruplets, and multi-turn packing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::UnitSequence;
use crate::error::{Error, Result};
use crate::lm::loss::Segment;
use crate::templates::{self, ChainFormat};
use crate::vocab::Vocab;

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub audio_path: String,
    pub transcript: String,
}

/// Loads a two-column TSV: audio_path TAB transcript. Blank lines skip.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (audio, transcript) = line
            .split_once('\t')
            .ok_or(Error::ManifestMissingTab { line: i + 1 })?;
        records.push(ManifestRecord {
            audio_path: audio.to_string(),
            transcript: transcript.to_string(),
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Cross-modal samples
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Asr,
    Tts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionPools {
    pub asr: Vec<String>,
    pub tts: Vec<String>,
}

impl DescriptionPools {
    pub fn validate(&self) -> Result<()> {
        if self.asr.is_empty() {
            return Err(Error::EmptyDescriptionPool("ASR".into()));
        }
        if self.tts.is_empty() {
            return Err(Error::EmptyDescriptionPool("TTS".into()));
        }
        Ok(())
    }
}

/// The seed description pools shipped with the crate (ten per task).
/// User-supplied pools can replace or extend them.
pub fn bundled_description_pools() -> DescriptionPools {
    serde_json::from_str(include_str!("../assets/descriptions.json"))
        .expect("bundled description pools are valid JSON")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalSample {
    pub task: Task,
    pub description: String,
    pub units: UnitSequence,
    pub transcript: String,
}

/// Pairs each manifest record with its unit sequence and draws an ASR task
/// with probability `p` (TTS otherwise), plus a uniform description from the
/// matching pool. Fully reproducible for a fixed seed.
pub fn build_cross_modal(
    records: &[ManifestRecord],
    units: &[UnitSequence],
    pools: &DescriptionPools,
    p: f64,
    seed: u64,
) -> Result<Vec<CrossModalSample>> {
    if records.len() != units.len() {
        return Err(Error::MisalignedInputs {
            left: records.len(),
            right: units.len(),
        });
    }
    pools.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(records.len());
    for (i, (rec, u)) in records.iter().zip(units.iter()).enumerate() {
        if rec.transcript.trim().is_empty() {
            return Err(Error::EmptyTranscript(i));
        }
        let task = if rng.gen::<f64>() < p { Task::Asr } else { Task::Tts };
        let pool = match task {
            Task::Asr => &pools.asr,
            Task::Tts => &pools.tts,
        };
        let description = pool[rng.gen_range(0..pool.len())].clone();
        samples.push(CrossModalSample {
            task,
            description,
            units: u.clone(),
            transcript: rec.transcript.clone(),
        });
    }
    Ok(samples)
}

/// Prefix and target halves of the formatted sample. The `{U}`/`{T}` slots
/// swap with the task direction: ASR reads units and writes the transcript,
/// TTS reads the transcript and writes units.
pub fn cross_modal_parts(s: &CrossModalSample) -> (String, String) {
    let rendered = s.units.render();
    match s.task {
        Task::Asr => templates::cross_modal_parts(&s.description, &rendered, &s.transcript),
        Task::Tts => templates::cross_modal_parts(&s.description, &s.transcript, &rendered),
    }
}

pub fn format_cross_modal(s: &CrossModalSample) -> String {
    let (prefix, target) = cross_modal_parts(s);
    prefix + &target
}

// ---------------------------------------------------------------------------
// Text instruction pairs (stage-2 mixing data and chain source)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextPair {
    pub instruction: String,
    pub response: String,
}

/// Bundled synthetic text-instruction pairs.
pub fn bundled_text_instructions() -> Vec<TextPair> {
    serde_json::from_str(include_str!("../assets/text_instructions.json"))
        .expect("bundled text instructions are valid JSON")
}

pub fn load_text_pairs(path: impl AsRef<Path>) -> Result<Vec<TextPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Prefix and target halves of a plain text-instruction sample.
pub fn text_pair_parts_of(pair: &TextPair) -> (String, String) {
    templates::text_pair_parts(&pair.instruction, &pair.response)
}

// ---------------------------------------------------------------------------
// Chain-of-modality quadruplets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ChainQuadruplet {
    pub speech_instruction: UnitSequence,
    pub text_instruction: String,
    pub text_response: String,
    pub speech_response: UnitSequence,
}

/// Responses longer than this many words are dropped from chain data.
pub const MAX_RESPONSE_WORDS: usize = 35;

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Builds quadruplets from text pairs via a text-to-unit generator, keeping
/// pairs whose response is at most MAX_RESPONSE_WORDS words. Returns the
/// quadruplets and the dropped-pair count.
pub fn build_chain_quadruplets(
    pairs: &[TextPair],
    mut text_to_units: impl FnMut(&str) -> Result<UnitSequence>,
) -> Result<(Vec<ChainQuadruplet>, usize)> {
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for pair in pairs {
        if word_count(&pair.response) > MAX_RESPONSE_WORDS {
            dropped += 1;
            continue;
        }
        if pair.instruction.trim().is_empty() || pair.response.trim().is_empty() {
            dropped += 1;
            continue;
        }
        let speech_instruction = text_to_units(&pair.instruction)?;
        let speech_response = text_to_units(&pair.response)?;
        out.push(ChainQuadruplet {
            speech_instruction,
            text_instruction: pair.instruction.clone(),
            text_response: pair.response.clone(),
            speech_response,
        });
    }
    Ok((out, dropped))
}

/// Prefix and target halves of a chain-formatted quadruplet.
pub fn chain_parts(q: &ChainQuadruplet, format: ChainFormat) -> (String, String) {
    let instruction_slot = if format.speech_instruction() {
        q.speech_instruction.render()
    } else {
        q.text_instruction.clone()
    };
    let prompt = templates::chain_prompt(format, &instruction_slot);
    let response = templates::chain_response(
        format,
        &q.text_instruction,
        &q.text_response,
        &q.speech_response.render(),
    );
    (prompt, response)
}

pub fn format_chain(q: &ChainQuadruplet, format: ChainFormat) -> String {
    let (prompt, response) = chain_parts(q, format);
    prompt + &response
}

// ---------------------------------------------------------------------------
// Tokenization and packing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSample {
    pub ids: Vec<u32>,
    pub prefix_len: usize,
}

/// Tokenizes a (prefix, target) pair; the prefix boundary falls exactly
/// after the literal "[SpeechGPT]: ".
pub fn tokenize_sample(vocab: &Vocab, prefix: &str, target: &str) -> Result<TokenizedSample> {
    let mut ids = vocab.encode(prefix)?;
    let prefix_len = ids.len();
    ids.extend(vocab.encode(target)?);
    Ok(TokenizedSample { ids, prefix_len })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub token_ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

/// Greedy packing in seeded shuffled order: samples append to the current
/// pack while the total stays within max_len, otherwise a new pack starts.
/// Samples are never split; individually overlong samples are dropped and
/// counted.
pub fn pack_multiturn(
    samples: &[TokenizedSample],
    max_len: usize,
    seed: u64,
) -> (Vec<PackedSequence>, usize) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut packs: Vec<PackedSequence> = Vec::new();
    let mut dropped = 0usize;
    let mut current = PackedSequence {
        token_ids: Vec::new(),
        segments: Vec::new(),
    };
    for &i in &order {
        let s = &samples[i];
        if s.ids.len() > max_len {
            dropped += 1;
            continue;
        }
        if current.token_ids.len() + s.ids.len() > max_len && !current.token_ids.is_empty() {
            packs.push(std::mem::replace(
                &mut current,
                PackedSequence {
                    token_ids: Vec::new(),
                    segments: Vec::new(),
                },
            ));
        }
        let start = current.token_ids.len();
        current.token_ids.extend_from_slice(&s.ids);
        current
            .segments
            .push(Segment::new(start, s.prefix_len, start + s.ids.len()));
    }
    if !current.token_ids.is_empty() {
        packs.push(current);
    }
    (packs, dropped)
}

// ---------------------------------------------------------------------------
// On-disk records (JSON-lines)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossModalRecord {
    pub task: Task,
    pub description: String,
    pub units: Vec<u32>,
    pub transcript: String,
}

impl From<&CrossModalSample> for CrossModalRecord {
    fn from(s: &CrossModalSample) -> Self {
        CrossModalRecord {
            task: s.task,
            description: s.description.clone(),
            units: s.units.units.clone(),
            transcript: s.transcript.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainRecord {
    pub format: ChainFormat,
    pub text_instruction: String,
    pub text_response: String,
    pub speech_instruction: Vec<u32>,
    pub speech_response: Vec<u32>,
}

impl ChainRecord {
    pub fn new(q: &ChainQuadruplet, format: ChainFormat) -> Self {
        ChainRecord {
            format,
            text_instruction: q.text_instruction.clone(),
            text_response: q.text_response.clone(),
            speech_instruction: q.speech_instruction.units.clone(),
            speech_response: q.speech_response.units.clone(),
        }
    }

    pub fn quadruplet(&self) -> ChainQuadruplet {
        ChainQuadruplet {
            speech_instruction: UnitSequence::new(self.speech_instruction.clone(), true),
            text_instruction: self.text_instruction.clone(),
            text_response: self.text_response.clone(),
            speech_response: UnitSequence::new(self.speech_response.clone(), true),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackedRecord {
    pub token_ids: Vec<u32>,
    pub segments: Vec<[usize; 3]>,
}

impl From<&PackedSequence> for PackedRecord {
    fn from(p: &PackedSequence) -> Self {
        PackedRecord {
            token_ids: p.token_ids.clone(),
            segments: p
                .segments
                .iter()
                .map(|s| [s.start, s.prefix_len, s.end])
                .collect(),
        }
    }
}

impl PackedRecord {
    pub fn sequence(&self) -> PackedSequence {
        PackedSequence {
            token_ids: self.token_ids.clone(),
            segments: self
                .segments
                .iter()
                .map(|s| Segment::new(s[0], s[1], s[2]))
                .collect(),
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn manifest_parses_and_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "a.wav\thello\n\nb.wav\tworld with\ttab\n").unwrap();
        let records = load_manifest(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].audio_path, "a.wav");
        assert_eq!(records[0].transcript, "hello");
        // transcript keeps everything after the first tab
        assert_eq!(records[1].transcript, "world with\ttab");

        std::fs::write(&path, "a.wav hello\n").unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(Error::ManifestMissingTab { line: 1 })
        ));

        std::fs::write(&path, "").unwrap();
        assert_eq!(load_manifest(&path).unwrap().len(), 0);
    }

    #[test]
    fn bundled_pools_have_ten_each() {
        let pools = bundled_description_pools();
        assert_eq!(pools.asr.len(), 10);
        assert_eq!(pools.tts.len(), 10);
        assert!(pools
            .asr
            .contains(&"Can you transcribe the speech into a written format?".to_string()));
    }

    fn record(i: usize) -> ManifestRecord {
        ManifestRecord {
            audio_path: format!("{i}.wav"),
            transcript: format!("transcript {i}"),
        }
    }

    fn units(i: usize) -> UnitSequence {
        UnitSequence::new(vec![i as u32 % 7, (i as u32 + 1) % 7], true)
    }

    #[test]
    fn task_probability_extremes() {
        let records: Vec<_> = (0..20).map(record).collect();
        let unit_seqs: Vec<_> = (0..20).map(units).collect();
        let pools = bundled_description_pools();
        let all_asr = build_cross_modal(&records, &unit_seqs, &pools, 1.0, 1).unwrap();
        assert!(all_asr.iter().all(|s| s.task == Task::Asr));
        let all_tts = build_cross_modal(&records, &unit_seqs, &pools, 0.0, 1).unwrap();
        assert!(all_tts.iter().all(|s| s.task == Task::Tts));
    }

    #[test]
    fn task_fraction_near_p_for_large_n() {
        // binomial oracle: at p=0.5 over n=10000, 3 sigma is
        // 3*sqrt(0.25/10000) = 0.015, well inside the +-0.03 band
        let records: Vec<_> = (0..10000).map(record).collect();
        let unit_seqs: Vec<_> = (0..10000).map(units).collect();
        let pools = bundled_description_pools();
        let samples = build_cross_modal(&records, &unit_seqs, &pools, 0.5, 7).unwrap();
        let asr = samples.iter().filter(|s| s.task == Task::Asr).count() as f64;
        let fraction = asr / samples.len() as f64;
        assert!((0.47..=0.53).contains(&fraction), "fraction {fraction}");
    }

    #[test]
    fn build_is_reproducible_and_checks_alignment() {
        let records: Vec<_> = (0..50).map(record).collect();
        let unit_seqs: Vec<_> = (0..50).map(units).collect();
        let pools = bundled_description_pools();
        let a = build_cross_modal(&records, &unit_seqs, &pools, 0.5, 3).unwrap();
        let b = build_cross_modal(&records, &unit_seqs, &pools, 0.5, 3).unwrap();
        assert_eq!(a, b);

        let fewer: Vec<_> = (0..49).map(units).collect();
        assert!(matches!(
            build_cross_modal(&records, &fewer, &pools, 0.5, 3),
            Err(Error::MisalignedInputs { left: 50, right: 49 })
        ));
    }

    #[test]
    fn formatting_swaps_slots_by_task() {
        let s = CrossModalSample {
            task: Task::Asr,
            description: "D".into(),
            units: UnitSequence::new(vec![1, 2], true),
            transcript: "T".into(),
        };
        assert_eq!(
            format_cross_modal(&s),
            "[Human]:D. This is input: <u_{1}><u_{2}><eoh>.[SpeechGPT]: T<eos>."
        );
        let s = CrossModalSample {
            task: Task::Tts,
            ..s
        };
        assert_eq!(
            format_cross_modal(&s),
            "[Human]:D. This is input: T<eoh>.[SpeechGPT]: <u_{1}><u_{2}><eos>."
        );
    }

    #[test]
    fn prefix_boundary_sits_after_the_speaker_marker() {
        let vocab = Vocab::new(10).unwrap();
        let s = CrossModalSample {
            task: Task::Asr,
            description: "D".into(),
            units: UnitSequence::new(vec![1], true),
            transcript: "T".into(),
        };
        let (prefix, target) = cross_modal_parts(&s);
        assert!(prefix.ends_with("[SpeechGPT]: "));
        let tok = tokenize_sample(&vocab, &prefix, &target).unwrap();
        let decoded = vocab.decode_to_string(&tok.ids[..tok.prefix_len]);
        assert!(decoded.ends_with("[SpeechGPT]: "));
        // prefix length does not depend on the target content
        let longer = tokenize_sample(&vocab, &prefix, "something much longer<eos>.").unwrap();
        assert_eq!(tok.prefix_len, longer.prefix_len);
    }

    #[test]
    fn packing_two_small_samples_into_one_pack() {
        let sample = |n: usize| TokenizedSample {
            ids: vec![1u32; n],
            prefix_len: 1,
        };
        let (packs, dropped) = pack_multiturn(&[sample(300), sample(300)], 1024, 1);
        assert_eq!(dropped, 0);
        assert_eq!(packs.len(), 1);
        assert_eq!(packs[0].segments.len(), 2);
        assert_eq!(packs[0].token_ids.len(), 600);

        let (packs, dropped) = pack_multiturn(&[sample(1100)], 1024, 1);
        assert_eq!(dropped, 1);
        assert!(packs.is_empty());
    }

    #[test]
    fn chain_quadruplets_filter_long_responses() {
        let pairs = bundled_text_instructions();
        let long = pairs
            .iter()
            .filter(|p| word_count(&p.response) > MAX_RESPONSE_WORDS)
            .count();
        assert!(long >= 2, "bundled data should exercise the filter");
        let (quads, dropped) = build_chain_quadruplets(&pairs, |text| {
            Ok(UnitSequence::new(
                vec![text.len() as u32 % 5, (text.len() as u32 + 1) % 5],
                true,
            ))
        })
        .unwrap();
        assert_eq!(dropped, long);
        assert_eq!(quads.len(), pairs.len() - long);
        assert!(quads
            .iter()
            .all(|q| word_count(&q.text_response) <= MAX_RESPONSE_WORDS));
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let recs = vec![
            CrossModalRecord {
                task: Task::Asr,
                description: "d".into(),
                units: vec![1, 2, 3],
                transcript: "t".into(),
            },
            CrossModalRecord {
                task: Task::Tts,
                description: "d2".into(),
                units: vec![4],
                transcript: "t2".into(),
            },
        ];
        write_jsonl(&path, &recs).unwrap();
        let back: Vec<CrossModalRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].units, vec![1, 2, 3]);
        assert!(matches!(back[1].task, Task::Tts));
    }

    proptest! {
        // conservation and no-split, quantified over random corpora
        #[test]
        fn packing_conserves_tokens(
            lens in proptest::collection::vec(2usize..40, 1..60),
            seed in 0u64..1000,
        ) {
            let samples: Vec<TokenizedSample> = lens
                .iter()
                .enumerate()
                .map(|(i, &n)| TokenizedSample { ids: vec![i as u32; n], prefix_len: 1 })
                .collect();
            let max_len = 64;
            let (packs, dropped) = pack_multiturn(&samples, max_len, seed);
            prop_assert_eq!(dropped, 0);
            let packed_total: usize = packs.iter().map(|p| p.token_ids.len()).sum();
            let input_total: usize = lens.iter().sum();
            prop_assert_eq!(packed_total, input_total);
            for p in &packs {
                prop_assert!(p.token_ids.len() <= max_len);
                // segments tile the pack exactly
                let mut cursor = 0usize;
                for s in &p.segments {
                    prop_assert_eq!(s.start, cursor);
                    prop_assert!(s.prefix_len < s.end - s.start);
                    cursor = s.end;
                }
                prop_assert_eq!(cursor, p.token_ids.len());
                // no sample was split: each segment is one whole input sample
                for s in &p.segments {
                    let tok = &p.token_ids[s.start..s.end];
                    prop_assert!(tok.iter().all(|&t| t == tok[0]));
                    prop_assert_eq!(s.end - s.start, lens[tok[0] as usize]);
                }
            }
        }
    }
}
