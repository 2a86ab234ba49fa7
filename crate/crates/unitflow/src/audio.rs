//! WAV loading and writing (RIFF/WAVE, PCM 16-bit little-endian, mono).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A mono waveform with samples in [-1.0, 1.0].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        debug_assert!(sample_rate > 0);
        debug_assert!(samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0));
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn read_u16(buf: &[u8], at: usize) -> Option<u16> {
    buf.get(at..at + 2).map(|b| u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(buf: &[u8], at: usize) -> Option<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Loads a RIFF/WAVE file. Only PCM 16-bit mono is accepted; samples are
/// scaled to [-1, 1] by dividing by 32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;

    if buf.len() < 12 || &buf[0..4] != b"RIFF" || &buf[8..12] != b"WAVE" {
        if buf.len() < 12 {
            return Err(Error::TruncatedHeader(path.to_path_buf()));
        }
        return Err(Error::NotWave(path.to_path_buf()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12usize;
    while pos + 8 <= buf.len() {
        let id = &buf[pos..pos + 4];
        let size = read_u32(&buf, pos + 4).unwrap() as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).filter(|&e| e <= buf.len());
        match id {
            b"fmt " => {
                let end = body_end.ok_or_else(|| Error::TruncatedHeader(path.to_path_buf()))?;
                if size < 16 {
                    return Err(Error::TruncatedHeader(path.to_path_buf()));
                }
                let format = read_u16(&buf[..end], body_start).unwrap();
                let channels = read_u16(&buf[..end], body_start + 2).unwrap();
                let rate = read_u32(&buf[..end], body_start + 4).unwrap();
                let bits = read_u16(&buf[..end], body_start + 14).unwrap();
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                let end = body_end.ok_or_else(|| Error::TruncatedHeader(path.to_path_buf()))?;
                data = Some(&buf[body_start..end]);
            }
            _ => {}
        }
        if body_end.is_none() {
            return Err(Error::TruncatedHeader(path.to_path_buf()));
        }
        // chunks are word-aligned
        pos = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| Error::TruncatedHeader(path.to_path_buf()))?;
    if format != 1 {
        return Err(Error::UnsupportedEncoding(path.to_path_buf()));
    }
    if channels != 1 {
        return Err(Error::UnsupportedChannels {
            path: path.to_path_buf(),
            channels,
        });
    }
    if bits != 16 {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            bits,
        });
    }
    let data = data.ok_or_else(|| Error::TruncatedHeader(path.to_path_buf()))?;

    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: rate,
    })
}

/// Writes a mono PCM 16-bit WAV file. Samples are clamped to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut buf = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&w.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
