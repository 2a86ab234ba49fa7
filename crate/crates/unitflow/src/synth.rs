//! Unit-to-audio synthesis: centroid mel lookup, mel-to-linear inversion via
//! the filterbank pseudo-inverse, and Griffin-Lim phase reconstruction.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::codec::{Codebook, UnitSequence};
use crate::error::{Error, Result};
use crate::features::{hann_window, mel_filterbank, FeatureConfig, FeatureFrames};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Frames emitted per reduced unit.
    pub repeat: usize,
    pub griffin_lim_iters: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            repeat: 2,
            griffin_lim_iters: 32,
        }
    }
}

/// Expands each unit to `repeat` frames of its centroid log-mel vector.
pub fn unit_mel_frames(u: &UnitSequence, cb: &Codebook, repeat: usize) -> Result<FeatureFrames> {
    if !u.reduced {
        return Err(Error::NotReduced);
    }
    u.validate(cb.k)?;
    let mut rows = Vec::with_capacity(u.len() * repeat);
    for &unit in &u.units {
        for _ in 0..repeat {
            rows.push(cb.centroid(unit as usize).to_vec());
        }
    }
    Ok(FeatureFrames::from_rows(rows, 20))
}

/// Solves A x = b for square A by Gauss-Jordan with partial pivoting.
fn solve_columns(a: &mut [f64], n: usize, b: &mut [f64], ncols: usize) {
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            for j in 0..ncols {
                b.swap(col * ncols + j, pivot * ncols + j);
            }
        }
        let p = a[col * n + col];
        let inv = 1.0 / p;
        for j in 0..n {
            a[col * n + j] *= inv;
        }
        for j in 0..ncols {
            b[col * ncols + j] *= inv;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = a[r * n + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                a[r * n + j] -= factor * a[col * n + j];
            }
            for j in 0..ncols {
                b[r * ncols + j] -= factor * b[col * ncols + j];
            }
        }
    }
}

/// Moore-Penrose pseudo-inverse of the mel filterbank (full row rank):
/// pinv(M) = M^T (M M^T)^-1, shape (n_bins x n_mels).
pub fn mel_pseudo_inverse(fb: &[f32], n_mels: usize, n_bins: usize) -> Vec<f64> {
    let mut gram = vec![0f64; n_mels * n_mels];
    for i in 0..n_mels {
        for j in 0..n_mels {
            let mut acc = 0f64;
            for k in 0..n_bins {
                acc += fb[i * n_bins + k] as f64 * fb[j * n_bins + k] as f64;
            }
            gram[i * n_mels + j] = acc;
        }
    }
    // small ridge keeps the solve stable for narrow low-frequency triangles
    let trace: f64 = (0..n_mels).map(|i| gram[i * n_mels + i]).sum();
    let ridge = 1e-10 * trace / n_mels as f64;
    for i in 0..n_mels {
        gram[i * n_mels + i] += ridge;
    }

    // columns of the inverse gram, solved all at once against identity
    let mut inv = vec![0f64; n_mels * n_mels];
    for i in 0..n_mels {
        inv[i * n_mels + i] = 1.0;
    }
    solve_columns(&mut gram, n_mels, &mut inv, n_mels);

    let mut pinv = vec![0f64; n_bins * n_mels];
    for k in 0..n_bins {
        for m in 0..n_mels {
            let mut acc = 0f64;
            for i in 0..n_mels {
                acc += fb[i * n_bins + k] as f64 * inv[i * n_mels + m];
            }
            pinv[k * n_mels + m] = acc;
        }
    }
    pinv
}

struct StftPlan {
    frame_len: usize,
    hop: usize,
    n_fft: usize,
    n_bins: usize,
    window: Vec<f32>,
}

impl StftPlan {
    fn new(cfg: &FeatureConfig) -> Self {
        let frame_len = cfg.frame_length();
        StftPlan {
            frame_len,
            hop: cfg.frame_hop(),
            n_fft: cfg.n_fft(),
            n_bins: cfg.n_bins(),
            window: hann_window(frame_len),
        }
    }

    fn signal_len(&self, num_frames: usize) -> usize {
        if num_frames == 0 {
            0
        } else {
            (num_frames - 1) * self.hop + self.frame_len
        }
    }
}

fn stft_complex(
    samples: &[f32],
    plan: &StftPlan,
    num_frames: usize,
    fft: &dyn rustfft::Fft<f32>,
) -> Vec<Complex<f32>> {
    let mut out = vec![Complex::new(0f32, 0f32); num_frames * plan.n_bins];
    let mut buf = vec![Complex::new(0f32, 0f32); plan.n_fft];
    for t in 0..num_frames {
        let start = t * plan.hop;
        for i in 0..plan.n_fft {
            let v = if i < plan.frame_len {
                samples[start + i] * plan.window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        out[t * plan.n_bins..(t + 1) * plan.n_bins].copy_from_slice(&buf[..plan.n_bins]);
    }
    out
}

fn istft(
    spec: &[Complex<f32>],
    plan: &StftPlan,
    num_frames: usize,
    ifft: &dyn rustfft::Fft<f32>,
) -> Vec<f32> {
    let n = plan.signal_len(num_frames);
    let mut signal = vec![0f64; n];
    let mut norm = vec![0f64; n];
    let mut buf = vec![Complex::new(0f32, 0f32); plan.n_fft];
    for t in 0..num_frames {
        let row = &spec[t * plan.n_bins..(t + 1) * plan.n_bins];
        buf[..plan.n_bins].copy_from_slice(row);
        // hermitian mirror for a real signal
        for k in plan.n_bins..plan.n_fft {
            buf[k] = row[plan.n_fft - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * plan.hop;
        for i in 0..plan.frame_len {
            let v = buf[i].re as f64 / plan.n_fft as f64;
            let w = plan.window[i] as f64;
            signal[start + i] += v * w;
            norm[start + i] += w * w;
        }
    }
    signal
        .iter()
        .zip(norm.iter())
        .map(|(&s, &d)| (s / d.max(1e-8)) as f32)
        .collect()
}

/// Griffin-Lim phase reconstruction from a magnitude spectrogram
/// (num_frames x n_bins, row-major). Phase starts at zero, so the result is
/// a pure function of the input.
pub fn griffin_lim(mag: &[f32], num_frames: usize, cfg: &FeatureConfig, iters: usize) -> Vec<f32> {
    let plan = StftPlan::new(cfg);
    assert_eq!(mag.len(), num_frames * plan.n_bins);
    if num_frames == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(plan.n_fft);
    let ifft = planner.plan_fft_inverse(plan.n_fft);

    let mut spec: Vec<Complex<f32>> = mag.iter().map(|&m| Complex::new(m, 0.0)).collect();
    for _ in 0..iters {
        let signal = istft(&spec, &plan, num_frames, ifft.as_ref());
        let rebuilt = stft_complex(&signal, &plan, num_frames, fft.as_ref());
        for (s, (&m, r)) in spec.iter_mut().zip(mag.iter().zip(rebuilt.iter())) {
            let norm = r.norm();
            *s = if norm > 1e-12 {
                r * (m / norm)
            } else {
                Complex::new(m, 0.0)
            };
        }
    }
    istft(&spec, &plan, num_frames, ifft.as_ref())
}

/// Reconstructs audio from reduced units: centroid mel frames, mel-to-linear
/// inversion (negatives clamped to zero), then Griffin-Lim.
pub fn synthesize(
    u: &UnitSequence,
    cb: &Codebook,
    synth: &SynthConfig,
    features: &FeatureConfig,
) -> Result<Waveform> {
    if cb.feature_dim != features.num_mel_bins {
        return Err(Error::DimensionMismatch {
            frames: features.num_mel_bins,
            codebook: cb.feature_dim,
        });
    }
    if u.is_empty() {
        return Ok(Waveform {
            samples: Vec::new(),
            sample_rate: features.sample_rate,
        });
    }
    let mel = unit_mel_frames(u, cb, synth.repeat)?;
    let n_bins = features.n_bins();
    let n_mels = features.num_mel_bins;
    let fb = mel_filterbank(n_mels, features.n_fft(), features.sample_rate);
    let pinv = mel_pseudo_inverse(&fb, n_mels, n_bins);

    let mut lin = vec![0f32; mel.num_frames * n_bins];
    for (t, row) in mel.rows().enumerate() {
        // invert the log and the filterbank
        let mel_mag: Vec<f64> = row
            .iter()
            .map(|&v| ((v as f64).exp() - features.log_floor as f64).max(0.0))
            .collect();
        for k in 0..n_bins {
            let mut acc = 0f64;
            for m in 0..n_mels {
                acc += pinv[k * n_mels + m] * mel_mag[m];
            }
            lin[t * n_bins + k] = acc.max(0.0) as f32;
        }
    }

    let mut samples = griffin_lim(&lin, mel.num_frames, features, synth.griffin_lim_iters);
    let peak = samples.iter().fold(0f32, |a, &s| a.max(s.abs()));
    if peak > 1.0 {
        let scale = 0.999 / peak;
        for s in &mut samples {
            *s *= scale;
        }
    }
    Ok(Waveform {
        samples,
        sample_rate: features.sample_rate,
    })
}
