//! Byte-level vocabulary with special tokens and unit-token expansion.
//!
//! Ids 0-255 are raw bytes, 256-263 the special tokens in a fixed order, and
//! base_size + u the unit token `<u_{u}>`. Expansion appends K unit tokens
//! and extends the embedding matrix while keeping the original rows intact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Special tokens in their fixed id order (ids 256..264).
pub const SPECIAL_TOKENS: [&str; 8] = [
    "[Human]",
    "[SpeechGPT]",
    "<eoh>",
    "<eos>",
    "<eoa>",
    "[tq]",
    "[ta]",
    "[ua]",
];

pub const BYTE_COUNT: u32 = 256;
pub const BASE_SIZE: u32 = BYTE_COUNT + SPECIAL_TOKENS.len() as u32;

pub const HUMAN: u32 = 256;
pub const SPEECHGPT: u32 = 257;
pub const EOH: u32 = 258;
pub const EOS: u32 = 259;
pub const EOA: u32 = 260;
pub const TQ: u32 = 261;
pub const TA: u32 = 262;
pub const UA: u32 = 263;

/// Base vocabulary plus K unit tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub base_size: u32,
    pub unit_count: u32,
}

impl Vocab {
    /// The byte-level base vocabulary expanded with K unit tokens.
    pub fn new(k: usize) -> Result<Self> {
        if k < 1 {
            return Err(Error::BadUnitCount);
        }
        Ok(Vocab {
            base_size: BASE_SIZE,
            unit_count: k as u32,
        })
    }

    pub fn total_size(&self) -> u32 {
        self.base_size + self.unit_count
    }

    pub fn unit_to_id(&self, unit: u32) -> Result<u32> {
        if unit >= self.unit_count {
            return Err(Error::UnitOutOfRange {
                unit,
                k: self.unit_count as usize,
            });
        }
        Ok(self.base_size + unit)
    }

    pub fn id_to_unit(&self, id: u32) -> Option<u32> {
        if id >= self.base_size && id < self.total_size() {
            Some(id - self.base_size)
        } else {
            None
        }
    }

    pub fn is_unit(&self, id: u32) -> bool {
        self.id_to_unit(id).is_some()
    }

    /// Encodes text that may contain special markers and `<u_{n}>` unit
    /// markers. Specials match longest-first; everything else is raw bytes.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let bytes = text.as_bytes();
        let mut ids = Vec::with_capacity(bytes.len());
        let mut pos = 0usize;
        'outer: while pos < bytes.len() {
            if bytes[pos..].starts_with(b"<u_{") {
                let digits_start = pos + 4;
                let mut end = digits_start;
                while end < bytes.len() && bytes[end].is_ascii_digit() {
                    end += 1;
                }
                let ok = end > digits_start
                    && bytes.get(end) == Some(&b'}')
                    && bytes.get(end + 1) == Some(&b'>')
                    // canonical decimal only, so decode(encode(x)) == x
                    && !(end - digits_start > 1 && bytes[digits_start] == b'0');
                if !ok {
                    return Err(Error::MalformedMarker(pos));
                }
                let n: u32 = std::str::from_utf8(&bytes[digits_start..end])
                    .unwrap()
                    .parse()
                    .map_err(|_| Error::MalformedMarker(pos))?;
                ids.push(self.unit_to_id(n)?);
                pos = end + 2;
                continue;
            }
            for &(id, tok) in specials_by_length() {
                if bytes[pos..].starts_with(tok.as_bytes()) {
                    ids.push(id);
                    pos += tok.len();
                    continue 'outer;
                }
            }
            ids.push(bytes[pos] as u32);
            pos += 1;
        }
        Ok(ids)
    }

    /// Decodes ids into typed segments. Byte runs and special markers fold
    /// into text; consecutive unit tokens form unit spans. Total: invalid
    /// UTF-8 byte runs decode lossily.
    pub fn decode(&self, ids: &[u32]) -> Vec<DecodedSegment> {
        let mut segments: Vec<DecodedSegment> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush_text = |bytes: &mut Vec<u8>, segments: &mut Vec<DecodedSegment>| {
            if bytes.is_empty() {
                return;
            }
            let text = String::from_utf8_lossy(bytes).into_owned();
            if let Some(DecodedSegment::Text(prev)) = segments.last_mut() {
                prev.push_str(&text);
            } else {
                segments.push(DecodedSegment::Text(text));
            }
            bytes.clear();
        };
        for &id in ids {
            if let Some(u) = self.id_to_unit(id) {
                flush_text(&mut bytes, &mut segments);
                if let Some(DecodedSegment::Units(units)) = segments.last_mut() {
                    units.push(u);
                } else {
                    segments.push(DecodedSegment::Units(vec![u]));
                }
            } else if id < BYTE_COUNT {
                bytes.push(id as u8);
            } else if let Some(tok) = SPECIAL_TOKENS.get((id - BYTE_COUNT) as usize) {
                bytes.extend_from_slice(tok.as_bytes());
            } else {
                // out-of-vocabulary id; render a replacement character
                bytes.extend_from_slice("\u{fffd}".as_bytes());
            }
        }
        flush_text(&mut bytes, &mut segments);
        segments
    }

    /// Decoded segments joined back into marker text.
    pub fn decode_to_string(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for seg in self.decode(ids) {
            match seg {
                DecodedSegment::Text(t) => out.push_str(&t),
                DecodedSegment::Units(units) => {
                    for u in units {
                        out.push_str(&format!("<u_{{{u}}}>"));
                    }
                }
            }
        }
        out
    }

    pub fn manifest(&self) -> VocabManifest {
        VocabManifest {
            version: 1,
            base_size: self.base_size,
            unit_count: self.unit_count,
            special_tokens: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn from_manifest(m: &VocabManifest) -> Result<Self> {
        if m.base_size != BASE_SIZE
            || m.special_tokens != SPECIAL_TOKENS.map(String::from).to_vec()
        {
            return Err(Error::Config("vocabulary manifest mismatch".into()));
        }
        Vocab::new(m.unit_count as usize)
    }
}

/// Specials with their ids, sorted longest first for greedy matching.
fn specials_by_length() -> &'static [(u32, &'static str)] {
    static CELL: std::sync::OnceLock<Vec<(u32, &'static str)>> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let mut v: Vec<(u32, &'static str)> = SPECIAL_TOKENS
            .iter()
            .enumerate()
            .map(|(i, &tok)| (BYTE_COUNT + i as u32, tok))
            .collect();
        v.sort_by_key(|(_, tok)| std::cmp::Reverse(tok.len()));
        v
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecodedSegment {
    Text(String),
    Units(Vec<u32>),
}

/// Persisted vocabulary description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabManifest {
    pub version: u32,
    pub base_size: u32,
    pub unit_count: u32,
    pub special_tokens: Vec<String>,
}

/// Row-major embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Seeded Gaussian init, standard deviation `scale`.
pub fn random_embeddings(rows: usize, dim: usize, seed: u64, scale: f32) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0f32, scale).unwrap();
    let values = (0..rows * dim).map(|_| normal.sample(&mut rng)).collect();
    EmbeddingMatrix { rows, dim, values }
}

/// Extends `base` with K new rows drawn i.i.d. from a seeded Gaussian.
/// The first |V| rows of the result are bit-identical copies of `base`.
pub fn expand_embeddings(
    base: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    init_scale: f32,
) -> Result<EmbeddingMatrix> {
    if k < 1 {
        return Err(Error::BadUnitCount);
    }
    if !base.values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteEmbedding);
    }
    let mut values = Vec::with_capacity((base.rows + k) * base.dim);
    values.extend_from_slice(&base.values);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0f32, init_scale).unwrap();
    for _ in 0..k * base.dim {
        values.push(normal.sample(&mut rng));
    }
    Ok(EmbeddingMatrix {
        rows: base.rows + k,
        dim: base.dim,
        values,
    })
}
