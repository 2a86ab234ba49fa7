//! Temperature / top-k / top-p sampling. Top-k filters first, then top-p
//! keeps the smallest high-probability prefix with cumulative mass >= p.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::ops::{Mat, Real};
use crate::lm::{LoraAdapters, Model};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub temperature: f32,
    pub top_k: usize,
    pub top_p: f32,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 0.8,
            top_k: 60,
            top_p: 0.8,
            max_new_tokens: 512,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.top_k < 1 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn greedy(&self) -> Self {
        SamplingConfig {
            top_k: 1,
            ..self.clone()
        }
    }
}

/// The renormalized support after temperature, top-k, then top-p filtering.
/// Sorted by descending probability, ties broken toward lower token ids.
pub fn filtered_distribution<T: Real>(logits: &[T], cfg: &SamplingConfig) -> Vec<(u32, f64)> {
    let inv_t = 1.0 / cfg.temperature as f64;
    let maxv = logits
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(u32, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, v)| (i as u32, ((v.as_f64() - maxv) * inv_t).exp()))
        .collect();
    let denom: f64 = probs.iter().map(|(_, p)| p).sum();
    for (_, p) in probs.iter_mut() {
        *p /= denom;
    }
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    probs.truncate(cfg.top_k.min(probs.len()));

    // smallest prefix whose cumulative mass reaches top_p; if the top-k cut
    // already dropped below that mass, every survivor stays
    let mut cum = 0f64;
    let mut keep = probs.len();
    for (i, (_, p)) in probs.iter().enumerate() {
        cum += p;
        if cum >= cfg.top_p as f64 {
            keep = i + 1;
            break;
        }
    }
    probs.truncate(keep);
    let mass: f64 = probs.iter().map(|(_, p)| p).sum();
    for (_, p) in probs.iter_mut() {
        *p /= mass;
    }
    probs
}

fn draw(dist: &[(u32, f64)], rng: &mut ChaCha8Rng) -> u32 {
    let r: f64 = rng.gen();
    let mut cum = 0f64;
    for &(tok, p) in dist {
        cum += p;
        if r < cum {
            return tok;
        }
    }
    dist.last().map(|&(tok, _)| tok).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    /// Newly generated ids, including the stop token when one was emitted.
    pub ids: Vec<u32>,
    /// True when generation hit max_new_tokens or the context limit
    /// without emitting a stop token.
    pub truncated: bool,
}

/// Autoregressive sampling. Stops on any of `stop_tokens` or after
/// max_new_tokens; running out of context also counts as truncation.
pub fn sample<T: Real>(
    model: &Model<T>,
    prompt: &[u32],
    cfg: &SamplingConfig,
    adapters: Option<&LoraAdapters<T>>,
    stop_tokens: &[u32],
) -> Result<Generated> {
    cfg.validate()?;
    if prompt.len() > model.cfg.max_len {
        return Err(Error::OverlongInput {
            len: prompt.len(),
            max_len: model.cfg.max_len,
        });
    }
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.max_new_tokens {
        if ids.len() >= model.cfg.max_len {
            return Ok(Generated {
                ids: out,
                truncated: true,
            });
        }
        let logits: Mat<T> = model.forward(&ids, adapters)?;
        let dist = filtered_distribution(logits.row(logits.rows - 1), cfg);
        let tok = draw(&dist, &mut rng);
        ids.push(tok);
        out.push(tok);
        if stop_tokens.contains(&tok) {
            return Ok(Generated {
                ids: out,
                truncated: false,
            });
        }
    }
    Ok(Generated {
        ids: out,
        truncated: true,
    })
}
