//! Prefix-masked negative log-likelihood.
//!
//! A sequence is tiled by segments (start, prefix_len, end). Scored target
//! positions are those past each segment's prefix; each target at position p
//! is predicted from the logits at p-1, so position 0 is never scorable.
//! Unmasked training (prefix_len = 0 everywhere) falls out as a special case.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::ops::{Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub prefix_len: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, prefix_len: usize, end: usize) -> Self {
        Segment {
            start,
            prefix_len,
            end,
        }
    }
}

/// Segments must be ordered, non-overlapping, and tile [0, len) exactly.
/// A segment whose prefix swallows it entirely scores nothing; when every
/// position is masked the loss paths report an empty target instead.
pub fn validate_segments(len: usize, segments: &[Segment]) -> Result<()> {
    if segments.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let mut cursor = 0usize;
    for s in segments {
        if s.start != cursor || s.end <= s.start || s.end > len || s.prefix_len > s.end - s.start {
            return Err(Error::BadSegment {
                start: s.start,
                prefix_len: s.prefix_len,
                end: s.end,
            });
        }
        cursor = s.end;
    }
    if cursor != len {
        return Err(Error::BadSegment {
            start: cursor,
            prefix_len: 0,
            end: len,
        });
    }
    Ok(())
}

/// Target positions that contribute loss terms.
pub fn scored_positions(segments: &[Segment]) -> Vec<usize> {
    let mut out = Vec::new();
    for s in segments {
        for p in s.start + s.prefix_len..s.end {
            if p >= 1 {
                out.push(p);
            }
        }
    }
    out
}

fn log_softmax_at<T: Real>(row: &[T], target: usize) -> (f64, f64) {
    // returns (log-sum-exp, max) over the row in f64
    let mut maxv = f64::NEG_INFINITY;
    for v in row {
        let v = v.as_f64();
        if v > maxv {
            maxv = v;
        }
    }
    let mut denom = 0f64;
    for v in row {
        denom += (v.as_f64() - maxv).exp();
    }
    let lse = maxv + denom.ln();
    let _ = target;
    (lse, maxv)
}

/// Mean NLL over scored positions.
pub fn nll_loss<T: Real>(logits: &Mat<T>, ids: &[u32], segments: &[Segment]) -> Result<f64> {
    let (sum, count) = nll_loss_sum(logits, ids, segments)?;
    Ok(sum / count as f64)
}

/// Sum-form NLL plus the scored-position count.
pub fn nll_loss_sum<T: Real>(
    logits: &Mat<T>,
    ids: &[u32],
    segments: &[Segment],
) -> Result<(f64, usize)> {
    assert_eq!(logits.rows, ids.len());
    validate_segments(ids.len(), segments)?;
    let positions = scored_positions(segments);
    if positions.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let mut sum = 0f64;
    for &p in &positions {
        let row = logits.row(p - 1);
        let (lse, _) = log_softmax_at(row, ids[p] as usize);
        sum += lse - row[ids[p] as usize].as_f64();
    }
    Ok((sum, positions.len()))
}

/// Sum-form NLL, scored count, and d(sum loss)/d(logits).
/// Divide the gradient by the count for mean-reduction semantics.
pub fn nll_loss_and_grad<T: Real>(
    logits: &Mat<T>,
    ids: &[u32],
    segments: &[Segment],
) -> Result<(f64, usize, Mat<T>)> {
    assert_eq!(logits.rows, ids.len());
    validate_segments(ids.len(), segments)?;
    let positions = scored_positions(segments);
    if positions.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let mut dlogits = Mat::zeros(logits.rows, logits.cols);
    let mut sum = 0f64;
    for &p in &positions {
        let row = logits.row(p - 1);
        let target = ids[p] as usize;
        let (lse, maxv) = log_softmax_at(row, target);
        sum += lse - row[target].as_f64();
        let denom = (lse - maxv).exp();
        let drow = dlogits.row_mut(p - 1);
        for (j, v) in row.iter().enumerate() {
            let softmax = ((v.as_f64() - maxv).exp() / denom).min(1.0);
            let grad = if j == target { softmax - 1.0 } else { softmax };
            drow[j] = drow[j] + T::from_f64(grad);
        }
    }
    Ok((sum, positions.len(), dlogits))
}
