//! Framewise log-mel spectral features.
//!
//! Magnitude STFT (Hann window, no padding) through a triangular mel
//! filterbank, then a natural log with a small floor. Pure functions of
//! (samples, config): identical input yields bit-identical output.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_length_ms: u32,
    pub frame_hop_ms: u32,
    pub num_mel_bins: usize,
    pub log_floor: f32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16000,
            frame_length_ms: 25,
            frame_hop_ms: 20,
            num_mel_bins: 40,
            log_floor: 1e-6,
        }
    }
}

impl FeatureConfig {
    pub fn frame_length(&self) -> usize {
        (self.sample_rate as u64 * self.frame_length_ms as u64 / 1000) as usize
    }

    pub fn frame_hop(&self) -> usize {
        (self.sample_rate as u64 * self.frame_hop_ms as u64 / 1000) as usize
    }

    /// FFT size: the next power of two at or above the frame length.
    pub fn n_fft(&self) -> usize {
        self.frame_length().next_power_of_two()
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft() / 2 + 1
    }
}

/// Framewise features, row-major by time.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrames {
    data: Vec<f32>,
    pub num_frames: usize,
    pub feature_dim: usize,
    pub frame_shift_ms: u32,
}

impl FeatureFrames {
    pub fn from_rows(rows: Vec<Vec<f32>>, frame_shift_ms: u32) -> Self {
        let num_frames = rows.len();
        let feature_dim = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(num_frames * feature_dim);
        for r in &rows {
            assert_eq!(r.len(), feature_dim);
            data.extend_from_slice(r);
        }
        FeatureFrames {
            data,
            num_frames,
            feature_dim,
            frame_shift_ms,
        }
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.feature_dim.max(1))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, shape (n_mels x n_bins), peak weight 1.
/// Band edges are equally spaced on the mel scale between 0 Hz and Nyquist;
/// the triangles are interpolated linearly in Hz.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<f32> {
    let n_bins = n_fft / 2 + 1;
    let f_max = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut fb = vec![0f32; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            let w = up.min(down).max(0.0);
            fb[m * n_bins + k] = w as f32;
        }
    }
    fb
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .map(|v| v as f32)
        .collect()
}

/// Magnitude STFT over fully contained frames (no padding).
/// Returns (frames x n_bins) row-major.
pub fn magnitude_stft(samples: &[f32], cfg: &FeatureConfig) -> Result<Vec<Vec<f32>>> {
    let frame_len = cfg.frame_length();
    let hop = cfg.frame_hop();
    if samples.len() < frame_len {
        return Err(Error::AudioTooShort {
            samples: samples.len(),
            needed: frame_len,
        });
    }
    let n_fft = cfg.n_fft();
    let n_bins = cfg.n_bins();
    let num_frames = (samples.len() - frame_len) / hop + 1;
    let window = hann_window(frame_len);

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Vec::with_capacity(num_frames);
    let mut buf = vec![Complex::new(0f32, 0f32); n_fft];
    for t in 0..num_frames {
        let start = t * hop;
        for i in 0..n_fft {
            let v = if i < frame_len {
                samples[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..n_bins].iter().map(|c| c.norm()).collect());
    }
    Ok(out)
}

/// Log-mel features: magnitude STFT -> mel filterbank -> ln(x + floor).
pub fn compute_frames(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureFrames> {
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::SampleRateMismatch {
            got: w.sample_rate,
            expected: cfg.sample_rate,
        });
    }
    let spectra = magnitude_stft(&w.samples, cfg)?;
    let n_bins = cfg.n_bins();
    let fb = mel_filterbank(cfg.num_mel_bins, cfg.n_fft(), cfg.sample_rate);

    let rows: Vec<Vec<f32>> = spectra
        .iter()
        .map(|spec| {
            (0..cfg.num_mel_bins)
                .map(|m| {
                    let mut acc = 0f32;
                    for k in 0..n_bins {
                        acc += fb[m * n_bins + k] * spec[k];
                    }
                    (acc + cfg.log_floor).ln()
                })
                .collect()
        })
        .collect();
    Ok(FeatureFrames::from_rows(rows, cfg.frame_hop_ms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, rate: u32) -> Waveform {
        let n = (secs * rate as f64) as usize;
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect();
        Waveform::new(samples, rate)
    }

    #[test]
    fn silence_gives_log_floor_everywhere() {
        let w = Waveform::new(vec![0.0; 16000], 16000);
        let cfg = FeatureConfig::default();
        let f = compute_frames(&w, &cfg).unwrap();
        assert_eq!(f.num_frames, 49);
        assert_eq!(f.feature_dim, 40);
        let expected = (1e-6f32).ln();
        for row in f.rows() {
            for &v in row {
                assert_eq!(v, expected);
            }
        }
    }

    // Independent oracle: locate 440 Hz among the filterbank triangles using
    // the mel-scale formula directly, without calling mel_filterbank.
    fn expected_bin_for(freq: f64, n_mels: usize, f_max: f64) -> usize {
        let mel_max = 2595.0 * (1.0 + f_max / 700.0).log10();
        let edge = |i: usize| 700.0 * (10f64.powf(mel_max * i as f64 / (n_mels + 1) as f64 / 2595.0) - 1.0);
        let mut best = (0usize, f64::MIN);
        for m in 0..n_mels {
            let (lo, c, hi) = (edge(m), edge(m + 1), edge(m + 2));
            let w = ((freq - lo) / (c - lo)).min((hi - freq) / (hi - c)).max(0.0);
            if w > best.1 {
                best = (m, w);
            }
        }
        best.0
    }

    #[test]
    fn sine_peaks_in_the_bin_containing_440hz() {
        let cfg = FeatureConfig::default();
        let w = sine(440.0, 1.0, 16000);
        let f = compute_frames(&w, &cfg).unwrap();
        let mut mean = vec![0f64; f.feature_dim];
        for row in f.rows() {
            for (m, &v) in row.iter().enumerate() {
                mean[m] += v as f64;
            }
        }
        let argmax = mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, expected_bin_for(440.0, 40, 8000.0));
    }

    #[test]
    fn too_short_input_rejected() {
        let w = Waveform::new(vec![0.1; 300], 16000);
        match compute_frames(&w, &FeatureConfig::default()) {
            Err(Error::AudioTooShort { samples, needed }) => {
                assert_eq!(samples, 300);
                assert_eq!(needed, 400);
            }
            other => panic!("expected audio too short, got {other:?}"),
        }
    }

    #[test]
    fn other_sample_rates_rejected() {
        let w = Waveform::new(vec![0.0; 8000], 8000);
        match compute_frames(&w, &FeatureConfig::default()) {
            Err(Error::SampleRateMismatch { got, expected }) => {
                assert_eq!(got, 8000);
                assert_eq!(expected, 16000);
            }
            other => panic!("expected rate mismatch, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_and_finite() {
        let w = sine(733.0, 0.3, 16000);
        let cfg = FeatureConfig::default();
        let a = compute_frames(&w, &cfg).unwrap();
        let b = compute_frames(&w, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn hop_of_silence_shifts_frames() {
        let cfg = FeatureConfig::default();
        let w = sine(291.0, 0.5, 16000);
        let mut padded = vec![0.0; cfg.frame_hop()];
        padded.extend_from_slice(&w.samples);
        let shifted = Waveform::new(padded, 16000);

        let orig = compute_frames(&w, &cfg).unwrap();
        let shift = compute_frames(&shifted, &cfg).unwrap();
        assert_eq!(shift.num_frames, orig.num_frames + 1);
        for t in 1..shift.num_frames {
            for (a, b) in shift.frame(t).iter().zip(orig.frame(t - 1).iter()) {
                assert!((a - b).abs() <= 1e-9, "frame {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn frame_count_matches_invariant() {
        let cfg = FeatureConfig::default();
        for n in [400usize, 401, 719, 720, 721, 16000] {
            let w = Waveform::new(vec![0.0; n], 16000);
            let f = compute_frames(&w, &cfg).unwrap();
            assert_eq!(f.num_frames, (n - 400) / 320 + 1, "n={n}");
        }
    }
}
